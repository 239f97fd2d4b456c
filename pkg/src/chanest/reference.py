"""Slow, independent reference implementations used for cross-checks.

Nothing here is on a production path: these are the oracles the test suite
and ``chanest selftest`` compare the fast implementations against.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "dft_direct",
    "conv2d_same_direct",
    "scan_quotient",
    "fd_gradient",
    "relative_gradient_error",
]


def dft_direct(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """O(N^2) unitary DFT along axis 0, both directions scaled by 1/sqrt(N)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[0]
    sign = 2j if inverse else -2j
    w = np.exp(sign * np.pi * np.outer(np.arange(n), np.arange(n)) / n) / np.sqrt(n)
    return w @ x


def conv2d_same_direct(x: np.ndarray, k: np.ndarray, bias=None) -> np.ndarray:
    """Naive loop cross-correlation with same-size zero padding."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    h, w, ci = x.shape
    kh, kw, _, co = k.shape
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((h, w, co))
    for oy in range(h):
        for ox in range(w):
            for dy in range(kh):
                iy = oy + dy - pt
                if iy < 0 or iy >= h:
                    continue
                for dx in range(kw):
                    ix = ox + dx - pl
                    if ix < 0 or ix >= w:
                        continue
                    out[oy, ox] += x[iy, ix] @ k[dy, dx]
    if bias is not None:
        out += np.asarray(bias)
    return out


def scan_quotient(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Bidirectional first-order recurrence via literal products and quotients.

    h_fwd[t] = (prod_{i<=t} a_i) * sum_{i<=t} b_i / prod_{j<=i} a_j, and the
    mirrored backward pass, summed.  The running products underflow for long
    sequences, so this form is only trusted for short inputs.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] > 32:
        raise ValueError("quotient form is numerically valid only for short sequences")
    pf = np.cumprod(a, axis=0)
    hf = pf * np.cumsum(b / pf, axis=0)
    ar = a[::-1]
    br = b[::-1]
    pb = np.cumprod(ar, axis=0)
    hb = (pb * np.cumsum(br / pb, axis=0))[::-1]
    return hf + hb


def fd_gradient(
    loss: Callable[[], float],
    arr: np.ndarray,
    indices: Sequence[tuple] | None = None,
    step: float = 1e-6,
) -> np.ndarray:
    """Central finite differences of ``loss()`` wrt entries of ``arr``.

    Perturbs ``arr`` in place (restoring it) at ``indices`` (default: every
    element) and returns the directional estimates in index order.
    """
    flat = arr.reshape(-1)
    if indices is None:
        idx = range(flat.size)
    else:
        idx = [int(np.ravel_multi_index(i, arr.shape)) for i in indices]
    grads = []
    for i in idx:
        keep = flat[i]
        flat[i] = keep + step
        up = loss()
        flat[i] = keep - step
        down = loss()
        flat[i] = keep
        grads.append((up - down) / (2.0 * step))
    return np.asarray(grads)


def relative_gradient_error(
    analytic: np.ndarray, estimate: np.ndarray, floor: float = 1e-5
) -> float:
    """Worst elementwise relative disagreement between gradient vectors.

    The denominator is floored at the resolution of a float64 central
    difference with step 1e-6 (~1e-5): components below that cannot be
    distinguished from finite-difference roundoff at any relative accuracy.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(estimate)), floor)
    return float((np.abs(analytic - estimate) / denom).max())
