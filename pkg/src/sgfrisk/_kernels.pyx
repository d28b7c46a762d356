# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for SGD / GD on the weak-features least-squares loss.

Both kernels iterate in place on ``beta`` and return the squared distance
``||target - beta||^2`` at every iteration count listed in ``record_at``
(sorted, non-decreasing, iteration 0 allowed).
"""
import numpy as np

from libc.math cimport isfinite
from libc.stdint cimport int64_t


def sgd_path(const double[:, ::1] X, const double[::1] y, double[::1] beta,
             const int64_t[:, ::1] idx, double gamma,
             const int64_t[::1] record_at, const double[::1] target):
    cdef Py_ssize_t iters = idx.shape[0]
    cdef Py_ssize_t batch = idx.shape[1]
    cdef Py_ssize_t p = X.shape[1]
    cdef Py_ssize_t n_rec = record_at.shape[0]
    cdef Py_ssize_t v, b, j, k, rec = 0
    cdef double r, acc, scale = gamma / batch
    cdef double[::1] res = np.empty(batch, dtype=np.float64)
    cdef double[::1] out = np.full(n_rec, np.nan, dtype=np.float64)
    cdef bint ok = True

    with nogil:
        v = 0
        while True:
            while rec < n_rec and record_at[rec] == v:
                acc = 0.0
                for j in range(p):
                    r = target[j] - beta[j]
                    acc = acc + r * r
                out[rec] = acc
                if not isfinite(acc):
                    ok = False
                rec = rec + 1
            if v >= iters or rec >= n_rec or not ok:
                break
            for b in range(batch):
                k = idx[v, b]
                acc = y[k]
                for j in range(p):
                    acc = acc - X[k, j] * beta[j]
                res[b] = acc
            for b in range(batch):
                k = idx[v, b]
                r = scale * res[b]
                for j in range(p):
                    beta[j] = beta[j] + r * X[k, j]
            v = v + 1
    return np.asarray(out)


def gd_path(const double[:, ::1] X, const double[::1] y, double[::1] beta,
            Py_ssize_t iters, double gamma,
            const int64_t[::1] record_at, const double[::1] target):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    cdef Py_ssize_t n_rec = record_at.shape[0]
    cdef Py_ssize_t v, i, j, rec = 0
    cdef double r, acc, scale = gamma / n
    cdef double[::1] res = np.empty(n, dtype=np.float64)
    cdef double[::1] out = np.full(n_rec, np.nan, dtype=np.float64)
    cdef bint ok = True

    with nogil:
        v = 0
        while True:
            while rec < n_rec and record_at[rec] == v:
                acc = 0.0
                for j in range(p):
                    r = target[j] - beta[j]
                    acc = acc + r * r
                out[rec] = acc
                if not isfinite(acc):
                    ok = False
                rec = rec + 1
            if v >= iters or rec >= n_rec or not ok:
                break
            for i in range(n):
                acc = y[i]
                for j in range(p):
                    acc = acc - X[i, j] * beta[j]
                res[i] = acc
            for i in range(n):
                r = scale * res[i]
                for j in range(p):
                    beta[j] = beta[j] + r * X[i, j]
            v = v + 1
    return np.asarray(out)
