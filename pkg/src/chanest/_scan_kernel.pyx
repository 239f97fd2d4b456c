# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the bidirectional first-order recurrence.

Same signatures and (L, K) float64 layout as ``_scan_numpy``; selected at
import by ``chanest.scan_backend`` when the extension was built.
"""

import numpy as np


def bidir_scan(double[:, ::1] a, double[:, ::1] b):
    """Forward and backward states of h_t = a_t * h_(t +/- 1) + b_t."""
    cdef Py_ssize_t length = a.shape[0]
    cdef Py_ssize_t width = a.shape[1]
    hf_arr = np.empty((length, width), dtype=np.float64)
    hb_arr = np.empty((length, width), dtype=np.float64)
    cdef double[:, ::1] hf = hf_arr
    cdef double[:, ::1] hb = hb_arr
    cdef Py_ssize_t t, j
    with nogil:
        for j in range(width):
            hf[0, j] = b[0, j]
        for t in range(1, length):
            for j in range(width):
                hf[t, j] = a[t, j] * hf[t - 1, j] + b[t, j]
        for j in range(width):
            hb[length - 1, j] = b[length - 1, j]
        for t in range(length - 2, -1, -1):
            for j in range(width):
                hb[t, j] = a[t, j] * hb[t + 1, j] + b[t, j]
    return hf_arr, hb_arr


def bidir_scan_vjp(double[:, ::1] a, double[:, ::1] hf, double[:, ::1] hb,
                   double[:, ::1] g):
    """Gradients of sum(g * (hf + hb)) with respect to a and b."""
    cdef Py_ssize_t length = a.shape[0]
    cdef Py_ssize_t width = a.shape[1]
    da_arr = np.zeros((length, width), dtype=np.float64)
    db_arr = np.empty((length, width), dtype=np.float64)
    lam_arr = np.zeros(width, dtype=np.float64)
    cdef double[:, ::1] da = da_arr
    cdef double[:, ::1] db = db_arr
    cdef double[::1] lam = lam_arr
    cdef Py_ssize_t t, j
    with nogil:
        # adjoint of the forward pass, swept right to left
        for j in range(width):
            lam[j] = g[length - 1, j]
            db[length - 1, j] = lam[j]
            if length > 1:
                da[length - 1, j] = lam[j] * hf[length - 2, j]
        for t in range(length - 2, -1, -1):
            for j in range(width):
                lam[j] = g[t, j] + a[t + 1, j] * lam[j]
                db[t, j] = lam[j]
                if t > 0:
                    da[t, j] = lam[j] * hf[t - 1, j]
        # adjoint of the backward pass, swept left to right
        for j in range(width):
            lam[j] = g[0, j]
            db[0, j] += lam[j]
            if length > 1:
                da[0, j] += lam[j] * hb[1, j]
        for t in range(1, length):
            for j in range(width):
                lam[j] = g[t, j] + a[t - 1, j] * lam[j]
                db[t, j] += lam[j]
                if t + 1 < length:
                    da[t, j] += lam[j] * hb[t + 1, j]
    return da_arr, db_arr
