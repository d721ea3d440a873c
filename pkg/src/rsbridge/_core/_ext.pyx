# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels in ``_fallback``."""
import numpy as np
from libc.math cimport sqrt, floor, NAN, isfinite
from scipy.linalg.cython_blas cimport dgemv


def sinkhorn_loop(double[:, ::1] A, double[:, ::1] B, double[::1] norm_w,
                  double[::1] f0, double tol, Py_ssize_t max_iters):
    cdef int n0 = A.shape[0]
    cdef int nT = A.shape[1]
    cdef int one = 1
    cdef int lda = nT
    cdef double alpha = 1.0
    cdef double beta = 0.0
    cdef char trans_t = b'T'
    cdef char trans_n = b'N'
    f = np.array(f0, dtype=np.float64, copy=True)
    g = np.empty(nT)
    v = np.empty(nT)
    a = np.empty(n0)
    res = np.empty(max_iters)
    cdef double[::1] fv = f, gv = g, vv = v, av = a, rv = res
    cdef Py_ssize_t it, k
    cdef double nrm, r, diff
    cdef int status = 1
    cdef Py_ssize_t done = max_iters
    with nogil:
        for it in range(max_iters):
            for k in range(nT):
                vv[k] = 1.0 / fv[k]
            dgemv(&trans_t, &nT, &n0, &alpha, &A[0, 0], &lda, &vv[0], &one, &beta, &av[0], &one)
            for k in range(n0):
                if not av[k] > 0:
                    status = 2
                    break
                av[k] = 1.0 / av[k]
            if status == 2:
                done = it
                break
            dgemv(&trans_n, &nT, &n0, &alpha, &B[0, 0], &lda, &av[0], &one, &beta, &gv[0], &one)
            nrm = 0.0
            for k in range(nT):
                nrm = nrm + gv[k] * gv[k] * norm_w[k]
            nrm = sqrt(nrm)
            if not (nrm > 0 and isfinite(nrm)):
                status = 2
                done = it
                break
            r = 0.0
            for k in range(nT):
                gv[k] = gv[k] / nrm
                diff = gv[k] - fv[k]
                r = r + diff * diff * norm_w[k]
                fv[k] = gv[k]
            rv[it] = sqrt(r)
            if rv[it] <= tol:
                status = 0
                done = it + 1
                break
    return f, done, res[:done], status


def interp1d_rows(double[:, ::1] table, Py_ssize_t[::1] rows, double[::1] x,
                  double node0, double h, int order, bint clamp):
    cdef Py_ssize_t N = x.shape[0]
    cdef Py_ssize_t n = table.shape[1]
    out = np.empty(N)
    cdef double[::1] ov = out
    cdef Py_ssize_t p, k, r
    cdef double s, u
    with nogil:
        for p in range(N):
            s = (x[p] - node0) / h
            if s < 0 or s > n - 1 or s != s:
                if clamp and s == s:
                    s = 0.0 if s < 0 else <double>(n - 1)
                else:
                    ov[p] = NAN
                    continue
            k = <Py_ssize_t>floor(s)
            if k > n - 2:
                k = n - 2
            u = s - k
            r = rows[p]
            if order == 3 and k >= 1 and k + 2 <= n - 1:
                ov[p] = (-u * (u - 1) * (u - 2) / 6.0 * table[r, k - 1]
                         + (u + 1) * (u - 1) * (u - 2) / 2.0 * table[r, k]
                         - (u + 1) * u * (u - 2) / 2.0 * table[r, k + 1]
                         + (u + 1) * u * (u - 1) / 6.0 * table[r, k + 2])
            else:
                ov[p] = (1.0 - u) * table[r, k] + u * table[r, k + 1]
    return out


def bin_points_1d(double[::1] x, Py_ssize_t[::1] regime, double lower, double h,
                  Py_ssize_t n, Py_ssize_t n_regimes):
    counts = np.zeros((n_regimes, n), dtype=np.int64)
    cdef long long[:, ::1] cv = counts
    cdef Py_ssize_t p, k
    cdef Py_ssize_t leak = 0
    cdef double s
    with nogil:
        for p in range(x.shape[0]):
            s = floor((x[p] - lower) / h)
            if s >= 0 and s < n:
                k = <Py_ssize_t>s
                cv[regime[p], k] += 1
            else:
                leak += 1
    return counts, leak
