# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled chain kernels: log-space forward-backward and Viterbi."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


def forward_backward(const double[:, ::1] node, const double[:, :, ::1] edge):
    cdef Py_ssize_t n = node.shape[0], k = node.shape[1]
    cdef Py_ssize_t i, a, b
    cdef double m, s, v, log_z
    alpha_arr = np.empty((n, k))
    beta_arr = np.zeros((n, k))
    node_arr = np.empty((n, k))
    edge_arr = np.empty((n - 1 if n > 0 else 0, k, k))
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr
    cdef double[:, ::1] nm = node_arr
    cdef double[:, :, ::1] em = edge_arr
    cdef double[::1] tmp = np.empty(k)

    for a in range(k):
        alpha[0, a] = node[0, a]
    for i in range(n - 1):
        for b in range(k):
            m = -INFINITY
            for a in range(k):
                v = alpha[i, a] + edge[i, a, b]
                if v > m:
                    m = v
            s = 0.0
            for a in range(k):
                s += exp(alpha[i, a] + edge[i, a, b] - m)
            alpha[i + 1, b] = node[i + 1, b] + m + log(s)
    for i in range(n - 2, -1, -1):
        for b in range(k):
            tmp[b] = node[i + 1, b] + beta[i + 1, b]
        for a in range(k):
            m = -INFINITY
            for b in range(k):
                v = edge[i, a, b] + tmp[b]
                if v > m:
                    m = v
            s = 0.0
            for b in range(k):
                s += exp(edge[i, a, b] + tmp[b] - m)
            beta[i, a] = m + log(s)
    m = -INFINITY
    for a in range(k):
        if alpha[n - 1, a] > m:
            m = alpha[n - 1, a]
    s = 0.0
    for a in range(k):
        s += exp(alpha[n - 1, a] - m)
    log_z = m + log(s)
    for i in range(n):
        for a in range(k):
            nm[i, a] = exp(alpha[i, a] + beta[i, a] - log_z)
    for i in range(n - 1):
        for b in range(k):
            tmp[b] = node[i + 1, b] + beta[i + 1, b] - log_z
        for a in range(k):
            for b in range(k):
                em[i, a, b] = exp(alpha[i, a] + edge[i, a, b] + tmp[b])
    return node_arr, edge_arr, log_z


def viterbi(const double[:, ::1] node, const double[:, :, ::1] edge):
    cdef Py_ssize_t n = node.shape[0], k = node.shape[1]
    cdef Py_ssize_t i, a, b, best
    cdef double m, v
    back_arr = np.zeros((n, k), dtype=np.intp)
    cdef Py_ssize_t[:, ::1] back = back_arr
    cdef double[::1] delta = np.empty(k)
    cdef double[::1] nxt = np.empty(k)
    y_arr = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] y = y_arr
    for a in range(k):
        delta[a] = node[0, a]
    for i in range(n - 1):
        for b in range(k):
            best = 0
            m = delta[0] + edge[i, 0, b]
            for a in range(1, k):
                v = delta[a] + edge[i, a, b]
                if v > m:
                    m = v
                    best = a
            back[i + 1, b] = best
            nxt[b] = node[i + 1, b] + m
        for b in range(k):
            delta[b] = nxt[b]
    best = 0
    for a in range(1, k):
        if delta[a] > delta[best]:
            best = a
    y[n - 1] = best
    for i in range(n - 1, 0, -1):
        y[i - 1] = back[i, y[i]]
    return y_arr, delta[best]
