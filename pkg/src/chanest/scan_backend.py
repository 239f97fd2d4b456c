"""Select the scan kernel implementation at import time.

The compiled Cython extension is preferred; the pure-numpy kernels are the
fallback (and always importable for cross-checks and benchmarks).  Set
``CHANEST_NO_EXT=1`` to force the fallback.
"""

from __future__ import annotations

import os

from chanest import _scan_numpy

ACTIVE_BACKEND = "numpy"
_impl = _scan_numpy

if not os.environ.get("CHANEST_NO_EXT"):
    try:
        from chanest import _scan_kernel as _impl  # type: ignore[no-redef]

        ACTIVE_BACKEND = "cython"
    except ImportError:
        pass

bidir_scan = _impl.bidir_scan
bidir_scan_vjp = _impl.bidir_scan_vjp
bidir_scan_parallel = _scan_numpy.bidir_scan_parallel


def available_backends() -> dict[str, object]:
    """Importable kernel modules keyed by backend name."""
    backends: dict[str, object] = {"numpy": _scan_numpy}
    try:
        from chanest import _scan_kernel

        backends["cython"] = _scan_kernel
    except ImportError:
        pass
    return backends
