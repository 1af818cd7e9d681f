# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, INFINITY

cnp.import_array()


def maxpool_forward(x, Py_ssize_t groups):
    cdef Py_ssize_t n = x.shape[0] // groups
    cdef Py_ssize_t dim = x.shape[1]
    if x.dtype == np.float32:
        return _maxpool_f32(np.ascontiguousarray(x), groups, n, dim)
    return _maxpool_f64(np.ascontiguousarray(x, dtype=np.float64), groups, n, dim)


cdef _maxpool_f32(float[:, ::1] x, Py_ssize_t groups, Py_ssize_t n, Py_ssize_t dim):
    out = np.empty((groups, dim), dtype=np.float32)
    idx = np.zeros((groups, dim), dtype=np.intp)
    cdef float[:, ::1] o = out
    cdef Py_ssize_t[:, ::1] ix = idx
    cdef Py_ssize_t g, r, c, row
    cdef float v
    for g in range(groups):
        o[g, :] = x[g * n, :]
        for r in range(1, n):
            row = g * n + r
            for c in range(dim):
                v = x[row, c]
                if v > o[g, c]:
                    o[g, c] = v
                    ix[g, c] = r
    return out, idx


cdef _maxpool_f64(double[:, ::1] x, Py_ssize_t groups, Py_ssize_t n, Py_ssize_t dim):
    out = np.empty((groups, dim), dtype=np.float64)
    idx = np.zeros((groups, dim), dtype=np.intp)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t[:, ::1] ix = idx
    cdef Py_ssize_t g, r, c, row
    cdef double v
    for g in range(groups):
        o[g, :] = x[g * n, :]
        for r in range(1, n):
            row = g * n + r
            for c in range(dim):
                v = x[row, c]
                if v > o[g, c]:
                    o[g, c] = v
                    ix[g, c] = r
    return out, idx


def maxpool_backward(grad, argmax, Py_ssize_t n):
    cdef Py_ssize_t groups = grad.shape[0]
    cdef Py_ssize_t dim = grad.shape[1]
    gx = np.zeros((groups * n, dim), dtype=grad.dtype)
    cdef Py_ssize_t[:, ::1] ix = np.ascontiguousarray(argmax, dtype=np.intp)
    cdef Py_ssize_t g, c
    cdef float[:, ::1] gf, gxf
    cdef double[:, ::1] gd, gxd
    if grad.dtype == np.float32:
        gf = np.ascontiguousarray(grad)
        gxf = gx
        for g in range(groups):
            for c in range(dim):
                gxf[g * n + ix[g, c], c] = gf[g, c]
    else:
        gd = np.ascontiguousarray(grad, dtype=np.float64)
        gxd = gx
        for g in range(groups):
            for c in range(dim):
                gxd[g * n + ix[g, c], c] = gd[g, c]
    return gx


def ranked_contrast(d2_in, mask_in, weight_in, double tau):
    cdef double[:, ::1] d2 = np.ascontiguousarray(d2_in, dtype=np.float64)
    cdef cnp.uint8_t[:, :, ::1] mask = np.ascontiguousarray(mask_in, dtype=np.uint8)
    cdef double[:, ::1] w = np.ascontiguousarray(weight_in, dtype=np.float64)
    cdef Py_ssize_t N = d2.shape[0]
    dist_arr = np.sqrt(np.maximum(np.asarray(d2), 0.0))
    cdef double[:, ::1] d = dist_arr
    gd_arr = np.zeros((N, N), dtype=np.float64)
    cdef double[:, ::1] gd = gd_arr
    cdef Py_ssize_t i, j, k
    cdef double m, z, lse, wij, loss = 0.0, a
    for i in range(N):
        for j in range(N):
            wij = w[i, j]
            if wij == 0.0:
                continue
            m = -INFINITY
            for k in range(N):
                if mask[i, j, k]:
                    a = -d[i, k] / tau
                    if a > m:
                        m = a
            if m == -INFINITY:
                continue
            z = 0.0
            for k in range(N):
                if mask[i, j, k]:
                    z += exp(-d[i, k] / tau - m)
            lse = m + log(z)
            loss += wij * (d[i, j] / tau + lse)
            gd[i, j] += wij / tau
            for k in range(N):
                if mask[i, j, k]:
                    gd[i, k] -= wij * exp(-d[i, k] / tau - lse) / tau
    for i in range(N):
        for k in range(N):
            if d[i, k] > 0.0:
                gd[i, k] = gd[i, k] / (2.0 * d[i, k])
            else:
                gd[i, k] = 0.0
    return loss, gd_arr
