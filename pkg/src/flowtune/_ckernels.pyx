# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Mirrors flowtune._pykernels exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp

cnp.import_array()

RBF, MATERN32, MATERN52 = 0, 1, 2


def pairwise_dist(A, B):
    cdef double[:, ::1] a = np.ascontiguousarray(A, dtype=np.float64)
    cdef double[:, ::1] b = np.ascontiguousarray(B, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, k
    cdef double acc, t
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                t = a[i, k] - b[j, k]
                acc += t * t
            o[i, j] = sqrt(acc)
    return out


def kernel_matrix(A, B, length_scales, int family, double signal_variance):
    cdef double[:, ::1] a = np.ascontiguousarray(A, dtype=np.float64)
    cdef double[:, ::1] b = np.ascontiguousarray(B, dtype=np.float64)
    cdef double[::1] ls = np.ascontiguousarray(length_scales, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    if family not in (0, 1, 2):
        raise ValueError(f"unknown kernel family code {family}")
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, k
    cdef double acc, t, r
    cdef double s3 = sqrt(3.0), s5 = sqrt(5.0)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                t = (a[i, k] - b[j, k]) / ls[k]
                acc += t * t
            if family == 0:
                o[i, j] = signal_variance * exp(-0.5 * acc)
            elif family == 1:
                r = sqrt(acc)
                o[i, j] = signal_variance * (1.0 + s3 * r) * exp(-s3 * r)
            else:
                r = sqrt(acc)
                o[i, j] = signal_variance * (1.0 + s5 * r + acc * (5.0 / 3.0)) * exp(-s5 * r)
    return out


cdef inline int _sign(double v) noexcept nogil:
    # branchless: pair signs are unpredictable on unsorted data
    return (v > 0) - (v < 0)


def kendall_tau_b(x, y):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], i, j
    cdef long long s = 0, nx = 0, ny = 0
    cdef int a, b
    if n < 2:
        return 0.0
    with nogil:
        for i in range(n - 1):
            for j in range(i + 1, n):
                a = _sign(xv[i] - xv[j])
                b = _sign(yv[i] - yv[j])
                s += a * b
                nx += a * a
                ny += b * b
    if nx == 0 or ny == 0:
        return 0.0
    return s / sqrt(<double>nx * <double>ny)


def nondominated_mask(F):
    cdef double[:, ::1] f = np.ascontiguousarray(F, dtype=np.float64)
    cdef Py_ssize_t m = f.shape[0], k = f.shape[1], i, j, c
    mask = np.ones(m, dtype=np.uint8)
    cdef cnp.uint8_t[::1] mk = mask
    cdef bint all_ge, any_gt
    with nogil:
        for i in range(m):
            for j in range(m):
                if j == i:
                    continue
                all_ge = True
                any_gt = False
                for c in range(k):
                    if f[j, c] < f[i, c]:
                        all_ge = False
                        break
                    if f[j, c] > f[i, c]:
                        any_gt = True
                if all_ge and any_gt:
                    mk[i] = 0
                    break
    return mask.astype(bool)


def min_dist_update(X, p, mind):
    cdef double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[::1] pv = np.ascontiguousarray(p, dtype=np.float64)
    cdef double[::1] md = mind
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, k
    cdef double acc, t
    with nogil:
        for i in range(n):
            acc = 0.0
            for k in range(d):
                t = x[i, k] - pv[k]
                acc += t * t
            acc = sqrt(acc)
            if acc < md[i]:
                md[i] = acc
    return mind
