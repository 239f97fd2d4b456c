"""Separable 1-D linear interpolation expressed as dense weight matrices."""

from __future__ import annotations

import numpy as np

__all__ = ["linear_interp_matrix"]


def linear_interp_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Matrix ``M`` with ``M @ values_at_src = linear interp at dst``.

    Source positions must be strictly increasing and at least two.  Targets
    outside the source hull continue the line through the two nearest source
    points (linear extrapolation), so affine functions are reproduced
    everywhere.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 1 or src.size < 2:
        raise ValueError("need at least two source positions")
    if np.any(np.diff(src) <= 0):
        raise ValueError("source positions must be strictly increasing")
    seg = np.clip(np.searchsorted(src, dst, side="right") - 1, 0, src.size - 2)
    t = (dst - src[seg]) / (src[seg + 1] - src[seg])
    m = np.zeros((dst.size, src.size))
    rows = np.arange(dst.size)
    m[rows, seg] = 1.0 - t
    m[rows, seg + 1] += t
    return m
