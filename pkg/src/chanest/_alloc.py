"""Glibc allocator tuning for allocation-heavy numeric loops.

Training and evaluation allocate and free many MB-scale buffers per step;
with default glibc settings those round-trip through mmap/munmap and the
kernel page-zeroing dominates the run time.  Raising the mmap threshold and
disabling trim keeps the buffers on the heap for reuse.  No-op off glibc.
"""

from __future__ import annotations

import ctypes
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_done = False


def tune_allocator() -> bool:
    """Keep large buffers heap-resident; returns True if tuning applied."""
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, 256 * 1024 * 1024)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, 256 * 1024 * 1024)
        _done = bool(ok)
    except (OSError, AttributeError):
        return False
    return _done
