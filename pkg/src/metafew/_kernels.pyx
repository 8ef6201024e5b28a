# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled numeric kernels; signatures mirror ``_kernels_py``."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh

cnp.import_array()

COMPILED = True

cdef double _SQRT_2_OVER_PI = 0.7978845608028654
cdef double _GELU_C = 0.044715


def layer_norm_fwd(double[:, ::1] x, double[::1] gain, double[::1] bias, double eps):
    cdef Py_ssize_t R = x.shape[0], D = x.shape[1]
    y_arr = np.empty((R, D))
    xhat_arr = np.empty((R, D))
    inv_arr = np.empty(R)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] inv = inv_arr
    cdef Py_ssize_t r, d
    cdef double mu, var, diff, istd
    for r in range(R):
        mu = 0.0
        for d in range(D):
            mu += x[r, d]
        mu /= D
        var = 0.0
        for d in range(D):
            diff = x[r, d] - mu
            var += diff * diff
        var /= D
        istd = 1.0 / sqrt(var + eps)
        inv[r] = istd
        for d in range(D):
            diff = (x[r, d] - mu) * istd
            xhat[r, d] = diff
            y[r, d] = diff * gain[d] + bias[d]
    return y_arr, xhat_arr, inv_arr


def layer_norm_bwd(double[:, ::1] g, double[:, ::1] xhat, double[::1] inv_std,
                   double[::1] gain):
    cdef Py_ssize_t R = g.shape[0], D = g.shape[1]
    gx_arr = np.empty((R, D))
    ggain_arr = np.zeros(D)
    gbias_arr = np.zeros(D)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggain = ggain_arr
    cdef double[::1] gbias = gbias_arr
    cdef Py_ssize_t r, d
    cdef double m1, m2, gh, istd
    for r in range(R):
        m1 = 0.0
        m2 = 0.0
        for d in range(D):
            gh = g[r, d] * gain[d]
            m1 += gh
            m2 += gh * xhat[r, d]
            ggain[d] += g[r, d] * xhat[r, d]
            gbias[d] += g[r, d]
        m1 /= D
        m2 /= D
        istd = inv_std[r]
        for d in range(D):
            gx[r, d] = istd * (g[r, d] * gain[d] - m1 - xhat[r, d] * m2)
    return gx_arr, ggain_arr, gbias_arr


def gelu_fwd(double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double v, u
    for i in range(n):
        v = x[i]
        u = _SQRT_2_OVER_PI * (v + _GELU_C * v * v * v)
        out[i] = 0.5 * v * (1.0 + tanh(u))
    return out_arr


def gelu_bwd(double[::1] x, double[::1] g):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double v, u, t, du
    for i in range(n):
        v = x[i]
        u = _SQRT_2_OVER_PI * (v + _GELU_C * v * v * v)
        t = tanh(u)
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * v * v)
        out[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    return out_arr


def softmax_fwd(double[:, ::1] x):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1]
    out_arr = np.empty((R, C))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, c
    cdef double m, s, e
    for r in range(R):
        m = x[r, 0]
        for c in range(1, C):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(C):
            e = exp(x[r, c] - m)
            out[r, c] = e
            s += e
        for c in range(C):
            out[r, c] /= s
    return out_arr


def softmax_bwd(double[:, ::1] y, double[:, ::1] g):
    cdef Py_ssize_t R = y.shape[0], C = y.shape[1]
    out_arr = np.empty((R, C))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, c
    cdef double s
    for r in range(R):
        s = 0.0
        for c in range(C):
            s += g[r, c] * y[r, c]
        for c in range(C):
            out[r, c] = y[r, c] * (g[r, c] - s)
    return out_arr


def log_softmax_fwd(double[:, ::1] x):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1]
    out_arr = np.empty((R, C))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, c
    cdef double m, s, lse
    for r in range(R):
        m = x[r, 0]
        for c in range(1, C):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(C):
            s += exp(x[r, c] - m)
        lse = log(s)
        for c in range(C):
            out[r, c] = x[r, c] - m - lse
    return out_arr


def log_softmax_bwd(double[:, ::1] y, double[:, ::1] g):
    cdef Py_ssize_t R = y.shape[0], C = y.shape[1]
    out_arr = np.empty((R, C))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, c
    cdef double s
    for r in range(R):
        s = 0.0
        for c in range(C):
            s += g[r, c]
        for c in range(C):
            out[r, c] = g[r, c] - exp(y[r, c]) * s
    return out_arr


def cross_entropy_fwd(double[:, ::1] logits, long long[::1] labels):
    cdef Py_ssize_t B = logits.shape[0], C = logits.shape[1]
    probs_arr = np.empty((B, C))
    cdef double[:, ::1] probs = probs_arr
    cdef Py_ssize_t r, c
    cdef double m, s, loss = 0.0
    for r in range(B):
        m = logits[r, 0]
        for c in range(1, C):
            if logits[r, c] > m:
                m = logits[r, c]
        s = 0.0
        for c in range(C):
            probs[r, c] = exp(logits[r, c] - m)
            s += probs[r, c]
        for c in range(C):
            probs[r, c] /= s
        loss -= logits[r, labels[r]] - m - log(s)
    return loss / B, probs_arr


def cross_entropy_bwd(double[:, ::1] probs, long long[::1] labels, double gout):
    cdef Py_ssize_t B = probs.shape[0], C = probs.shape[1]
    out_arr = np.empty((B, C))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, c
    cdef double scale = gout / B
    for r in range(B):
        for c in range(C):
            out[r, c] = probs[r, c] * scale
        out[r, labels[r]] -= scale
    return out_arr


def embedding_grad(long long[::1] ids, double[:, ::1] g, Py_ssize_t vocab_size):
    cdef Py_ssize_t n = ids.shape[0], D = g.shape[1]
    out_arr = np.zeros((vocab_size, D))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, d, row
    for i in range(n):
        row = ids[i]
        for d in range(D):
            out[row, d] += g[i, d]
    return out_arr
