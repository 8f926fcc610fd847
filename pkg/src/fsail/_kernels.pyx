# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels; same contract as ``fsail._kernels_py``.

Each kernel makes a single pass per row where numpy needs several
temporaries.  No fast-math: results stay IEEE and deterministic.
"""

import numpy as np

from libc.math cimport exp, log, sqrt

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


cdef inline double _tanh(double z) noexcept nogil:
    # libm tanh is several times slower than exp; this form is exact up to
    # rounding and saturates cleanly (exp overflow gives 1, underflow -1)
    return 1.0 - 2.0 / (exp(2.0 * z) + 1.0)


def softmax_rows_forward(const double[:, ::1] x):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1], i, j
    out = np.empty((r, c), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double m, s
    with nogil:
        for i in range(r):
            m = x[i, 0]
            for j in range(1, c):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(c):
                o[i, j] = exp(x[i, j] - m)
                s += o[i, j]
            for j in range(c):
                o[i, j] = o[i, j] / s
    return out


def softmax_rows_backward(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t r = y.shape[0], c = y.shape[1], i, j
    out = np.empty((r, c), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double dot
    with nogil:
        for i in range(r):
            dot = 0.0
            for j in range(c):
                dot += gy[i, j] * y[i, j]
            for j in range(c):
                o[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


def log_softmax_rows(const double[:, ::1] x):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1], i, j
    out = np.empty((r, c), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double m, s, lse
    with nogil:
        for i in range(r):
            m = x[i, 0]
            for j in range(1, c):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(c):
                s += exp(x[i, j] - m)
            lse = log(s)
            for j in range(c):
                o[i, j] = (x[i, j] - m) - lse
    return out


def layer_norm_forward(const double[:, ::1] x, const double[::1] gain,
                       const double[::1] bias, double eps):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1], i, j
    out = np.empty((r, c), dtype=np.float64)
    xhat_arr = np.empty((r, c), dtype=np.float64)
    rstd_arr = np.empty(r, dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[:, ::1] xh = xhat_arr
    cdef double[::1] rs = rstd_arr
    cdef double mu, var, d, inv
    with nogil:
        for i in range(r):
            mu = 0.0
            for j in range(c):
                mu += x[i, j]
            mu = mu / c
            var = 0.0
            for j in range(c):
                d = x[i, j] - mu
                var += d * d
            var = var / c
            inv = 1.0 / sqrt(var + eps)
            rs[i] = inv
            for j in range(c):
                d = (x[i, j] - mu) * inv
                xh[i, j] = d
                o[i, j] = d * gain[j] + bias[j]
    return out, xhat_arr, rstd_arr


def layer_norm_backward(const double[:, ::1] gy, const double[:, ::1] xhat,
                        const double[::1] rstd, const double[::1] gain):
    cdef Py_ssize_t r = gy.shape[0], c = gy.shape[1], i, j
    gx_arr = np.empty((r, c), dtype=np.float64)
    gg_arr = np.zeros(c, dtype=np.float64)
    gb_arr = np.zeros(c, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    cdef double m1, m2, gxh, scale
    with nogil:
        for i in range(r):
            m1 = 0.0
            m2 = 0.0
            for j in range(c):
                gxh = gy[i, j] * gain[j]
                m1 += gxh
                m2 += gxh * xhat[i, j]
                gg[j] += gy[i, j] * xhat[i, j]
                gb[j] += gy[i, j]
            scale = rstd[i] / c
            for j in range(c):
                gx[i, j] = (c * (gy[i, j] * gain[j]) - m1 - xhat[i, j] * m2) * scale
    return gx_arr, gg_arr, gb_arr


def gelu_forward(const double[:, ::1] x):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1], i, j
    out = np.empty((r, c), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double v
    with nogil:
        for i in range(r):
            for j in range(c):
                v = x[i, j]
                o[i, j] = 0.5 * v * (1.0 + _tanh(GELU_C * (v + GELU_A * (v * v * v))))
    return out


def gelu_backward(const double[:, ::1] x, const double[:, ::1] gy):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1], i, j
    out = np.empty((r, c), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double v, t, dinner
    with nogil:
        for i in range(r):
            for j in range(c):
                v = x[i, j]
                t = _tanh(GELU_C * (v + GELU_A * (v * v * v)))
                dinner = GELU_C * (1.0 + 3 * GELU_A * v * v)
                o[i, j] = gy[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
    return out
