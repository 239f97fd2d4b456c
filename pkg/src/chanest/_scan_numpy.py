"""Pure-numpy kernels for the bidirectional first-order recurrence.

Layout convention for all kernels: time-major ``(L, K)`` float64 arrays,
where K flattens whatever batch/channel axes the caller carries.  The
compiled extension in ``_scan_kernel.pyx`` implements the same signatures.
"""

from __future__ import annotations

import numpy as np


def bidir_scan(a: np.ndarray, b: np.ndarray):
    """Forward and backward states of h_t = a_t * h_(t +/- 1) + b_t."""
    length = a.shape[0]
    hf = np.empty_like(b)
    hb = np.empty_like(b)
    state = np.zeros(a.shape[1])
    for t in range(length):
        state = a[t] * state + b[t]
        hf[t] = state
    state = np.zeros(a.shape[1])
    for t in range(length - 1, -1, -1):
        state = a[t] * state + b[t]
        hb[t] = state
    return hf, hb


def bidir_scan_vjp(a, hf, hb, g):
    """Gradients of sum(g * (hf + hb)) with respect to a and b."""
    length = a.shape[0]
    da = np.empty_like(a)
    db = np.empty_like(a)
    lam = np.zeros(a.shape[1])
    for t in range(length - 1, -1, -1):
        if t + 1 < length:
            lam = g[t] + a[t + 1] * lam
        else:
            lam = g[t].copy()
        da[t] = lam * hf[t - 1] if t > 0 else 0.0
        db[t] = lam
    mu = np.zeros(a.shape[1])
    for t in range(length):
        if t > 0:
            mu = g[t] + a[t - 1] * mu
        else:
            mu = g[t].copy()
        if t + 1 < length:
            da[t] += mu * hb[t + 1]
        db[t] += mu
    return da, db


def prefix_scan_doubling(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Inclusive scan of the recurrence via log2(L) vectorized combine sweeps.

    Uses the associative pair combine (a1,b1)*(a2,b2) = (a1*a2, a2*b1 + b2),
    which is algebraically the product/quotient closed form but never divides
    by a running product.
    """
    av = a.copy()
    bv = b.copy()
    length = av.shape[0]
    step = 1
    while step < length:
        bv[step:] = bv[step:] + av[step:] * bv[:-step]
        av[step:] = av[step:] * av[:-step]
        step *= 2
    return bv


def bidir_scan_parallel(a: np.ndarray, b: np.ndarray):
    """Bidirectional states computed with the parallel combine formulation."""
    hf = prefix_scan_doubling(a, b)
    hb = prefix_scan_doubling(a[::-1], b[::-1])[::-1].copy()
    return hf, hb
