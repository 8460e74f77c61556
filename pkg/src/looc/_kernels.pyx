# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row kernels for softmax, entropy and threshold sweeps.

Signatures and results match ``looc._kernels_py``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def softmax_rows(z, double temperature):
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t b = zv.shape[0], c = zv.shape[1], i, j
    out = np.empty((b, c), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double m, s, inv_t = 1.0 / temperature
    for i in range(b):
        m = zv[i, 0] * inv_t
        for j in range(1, c):
            if zv[i, j] * inv_t > m:
                m = zv[i, j] * inv_t
        s = 0.0
        for j in range(c):
            ov[i, j] = exp(zv[i, j] * inv_t - m)
            s += ov[i, j]
        for j in range(c):
            ov[i, j] /= s
    return out


def softmax_rows_backward(p, grad_p, double temperature):
    cdef const double[:, ::1] pv = np.ascontiguousarray(p, dtype=np.float64)
    cdef const double[:, ::1] gv = np.ascontiguousarray(grad_p, dtype=np.float64)
    cdef Py_ssize_t b = pv.shape[0], c = pv.shape[1], i, j
    out = np.empty((b, c), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double inner
    for i in range(b):
        inner = 0.0
        for j in range(c):
            inner += gv[i, j] * pv[i, j]
        for j in range(c):
            ov[i, j] = pv[i, j] * (gv[i, j] - inner) / temperature
    return out


def entropy_rows(p, double floor):
    cdef const double[:, ::1] pv = np.ascontiguousarray(p, dtype=np.float64)
    cdef Py_ssize_t b = pv.shape[0], c = pv.shape[1], i, j
    out = np.empty(b, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double h, x
    for i in range(b):
        h = 0.0
        for j in range(c):
            x = pv[i, j]
            if x >= floor:
                h -= x * log(x)
        ov[i] = h
    return out


def entropy_rows_backward(p, grad_h, double floor):
    cdef const double[:, ::1] pv = np.ascontiguousarray(p, dtype=np.float64)
    cdef const double[::1] gv = np.ascontiguousarray(grad_h, dtype=np.float64)
    cdef Py_ssize_t b = pv.shape[0], c = pv.shape[1], i, j
    out = np.empty((b, c), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double x
    for i in range(b):
        for j in range(c):
            x = pv[i, j]
            if x >= floor:
                ov[i, j] = -(log(x) + 1.0) * gv[i]
            else:
                ov[i, j] = 0.0
    return out


def threshold_counts(sorted_scores, sorted_pos):
    cdef const double[::1] sv = np.ascontiguousarray(sorted_scores, dtype=np.float64)
    cdef const cnp.npy_bool[::1] pv = np.ascontiguousarray(sorted_pos, dtype=np.bool_)
    cdef Py_ssize_t n = sv.shape[0], i, k = 1
    tp_out = np.zeros(n + 1, dtype=np.int64)
    fp_out = np.zeros(n + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] tv = tp_out
    cdef cnp.int64_t[::1] fv = fp_out
    cdef cnp.int64_t tp = 0, fp = 0
    for i in range(n):
        if pv[i]:
            tp += 1
        else:
            fp += 1
        if i == n - 1 or sv[i + 1] != sv[i]:
            tv[k] = tp
            fv[k] = fp
            k += 1
    return tp_out[:k], fp_out[:k]
