# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Semantics mirror pdcap._pykernels exactly."""

import numpy as np


def avg_pool2d(grid, Py_ssize_t bin):
    cdef double[:, :, ::1] g = np.ascontiguousarray(grid, dtype=np.float64)
    cdef Py_ssize_t w = g.shape[0], h = g.shape[1], d = g.shape[2]
    cdef Py_ssize_t ow = w - bin + 1, oh = h - bin + 1
    out_arr = np.zeros((ow, oh, d))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t x, y, c, dx, dy
    cdef double inv = <double>(bin * bin)
    for dx in range(bin):
        for dy in range(bin):
            for x in range(ow):
                for y in range(oh):
                    for c in range(d):
                        out[x, y, c] += g[x + dx, y + dy, c]
    for x in range(ow):
        for y in range(oh):
            for c in range(d):
                out[x, y, c] /= inv
    return out_arr


def lcs_length(a, b):
    cdef long long[::1] sa = np.ascontiguousarray(a, dtype=np.int64)
    cdef long long[::1] sb = np.ascontiguousarray(b, dtype=np.int64)
    if sa.shape[0] < sb.shape[0]:
        sa, sb = sb, sa
    cdef Py_ssize_t n = sa.shape[0], m = sb.shape[0], i, j
    prev_arr = np.zeros(m + 1, dtype=np.int64)
    cur_arr = np.zeros(m + 1, dtype=np.int64)
    cdef long long[::1] prev = prev_arr
    cdef long long[::1] cur = cur_arr
    cdef long long[::1] tmp
    for i in range(n):
        cur[0] = 0
        for j in range(m):
            if sa[i] == sb[j]:
                cur[j + 1] = prev[j] + 1
            elif cur[j] > prev[j + 1]:
                cur[j + 1] = cur[j]
            else:
                cur[j + 1] = prev[j + 1]
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])
