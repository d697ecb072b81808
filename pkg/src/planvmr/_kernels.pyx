# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: LCS dynamic program and threshold walks."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def lcs_length(const long long[::1] a, const long long[::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    if n < m:
        a, b = b, a
        n, m = m, n
    if m == 0:
        return 0
    cdef long long[::1] prev = np.zeros(m + 1, dtype=np.int64)
    cdef long long[::1] cur = np.zeros(m + 1, dtype=np.int64)
    cdef long long[::1] tmp
    cdef long long x
    for i in range(n):
        x = a[i]
        cur[0] = 0
        for j in range(m):
            if x == b[j]:
                cur[j + 1] = prev[j] + 1
            elif cur[j] > prev[j + 1]:
                cur[j + 1] = cur[j]
            else:
                cur[j + 1] = prev[j + 1]
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])


def walk_down(const double[::1] sims, Py_ssize_t idx, double tau):
    cdef Py_ssize_t t = idx, i = idx
    while i >= 0:
        if sims[i] < tau:
            break
        t = i
        i -= 1
    return t


def walk_up(const double[::1] sims, Py_ssize_t idx, double tau):
    cdef Py_ssize_t t = idx, i = idx, n = sims.shape[0]
    while i < n:
        if sims[i] < tau:
            break
        t = i
        i += 1
    return t


def expand_above(const double[::1] sims, Py_ssize_t idx, double tau):
    cdef Py_ssize_t lo = idx, hi = idx, n = sims.shape[0]
    while lo > 0 and sims[lo - 1] > tau:
        lo -= 1
    while hi < n - 1 and sims[hi + 1] > tau:
        hi += 1
    return lo, hi
