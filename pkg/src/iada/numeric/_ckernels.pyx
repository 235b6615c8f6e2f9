# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels. Mirrors ``_pykernels`` name for name."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fmax, fmin, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


cdef inline double _tanh(double u) noexcept nogil:
    # libm tanh is several times slower than exp here
    cdef double e
    if u > 20.0:
        return 1.0
    if u < -20.0:
        return -1.0
    e = exp(2.0 * u)
    return (e - 1.0) / (e + 1.0)


def _softmax_fwd(real[:, ::1] x, real[:, ::1] p):
    cdef Py_ssize_t i, j, n = x.shape[0], m = x.shape[1]
    cdef double mx, s, e
    with nogil:
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, m):
                mx = fmax(mx, x[i, j])
            s = 0.0
            for j in range(m):
                e = exp(x[i, j] - mx)
                p[i, j] = <real>e
                s += e
            s = 1.0 / s
            for j in range(m):
                p[i, j] = <real>(p[i, j] * s)


def _softmax_fwd_masked(real[:, ::1] x, const unsigned char[:, ::1] mask, real[:, ::1] p):
    cdef Py_ssize_t i, j, n = x.shape[0], m = x.shape[1]
    cdef double mx, s, e
    with nogil:
        for i in range(n):
            mx = -1e300
            for j in range(m):
                mx = fmax(mx, x[i, j] if mask[i, j] else -1e300)
            s = 0.0
            for j in range(m):
                if mask[i, j]:
                    e = exp(x[i, j] - mx)
                    p[i, j] = <real>e
                    s += e
                else:
                    p[i, j] = 0
            if s > 0.0:
                s = 1.0 / s
                for j in range(m):
                    p[i, j] = <real>(p[i, j] * s)


def softmax_forward(x, mask=None):
    p = np.empty_like(x)
    if mask is None:
        _softmax_fwd(x, p)
    else:
        _softmax_fwd_masked(x, np.ascontiguousarray(mask, dtype=np.uint8), p)
    return p


def _softmax_bwd(real[:, ::1] p, real[:, ::1] dp, real[:, ::1] dx):
    cdef Py_ssize_t i, j, n = p.shape[0], m = p.shape[1]
    cdef double s
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(m):
                s += p[i, j] * dp[i, j]
            for j in range(m):
                dx[i, j] = <real>(p[i, j] * (dp[i, j] - s))


def softmax_backward(p, dp):
    dx = np.empty_like(p)
    _softmax_bwd(p, np.ascontiguousarray(dp, dtype=p.dtype), dx)
    return dx


def _ln_fwd(real[:, ::1] x, double eps, real[:, ::1] xhat, real[::1] rstd):
    cdef Py_ssize_t i, j, n = x.shape[0], m = x.shape[1]
    cdef double mu, var, d, r
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(m):
                mu += x[i, j]
            mu /= m
            var = 0.0
            for j in range(m):
                d = x[i, j] - mu
                var += d * d
            var /= m
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <real>r
            for j in range(m):
                xhat[i, j] = <real>((x[i, j] - mu) * r)


def layernorm_forward(x, eps):
    xhat = np.empty_like(x)
    rstd = np.empty(x.shape[0], dtype=x.dtype)
    _ln_fwd(x, eps, xhat, rstd)
    return xhat, rstd


def _ln_bwd(real[:, ::1] g, real[:, ::1] xhat, real[::1] rstd, real[:, ::1] dx):
    cdef Py_ssize_t i, j, n = g.shape[0], m = g.shape[1]
    cdef double a, b
    with nogil:
        for i in range(n):
            a = 0.0
            b = 0.0
            for j in range(m):
                a += g[i, j]
                b += g[i, j] * xhat[i, j]
            a /= m
            b /= m
            for j in range(m):
                dx[i, j] = <real>((g[i, j] - a - xhat[i, j] * b) * rstd[i])


def layernorm_backward(dxhat, xhat, rstd):
    dx = np.empty_like(xhat)
    _ln_bwd(np.ascontiguousarray(dxhat, dtype=xhat.dtype), xhat, rstd, dx)
    return dx


def _gelu_fwd(real[::1] x, real[::1] y):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            y[i] = <real>(0.5 * v * (1.0 + _tanh(GELU_C * (v + GELU_A * v * v * v))))


def gelu_forward(x):
    flat = np.ascontiguousarray(x).reshape(-1)
    y = np.empty_like(flat)
    _gelu_fwd(flat, y)
    return y.reshape(x.shape)


def _gelu_bwd(real[::1] x, real[::1] dy, real[::1] dx):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, t, dt
    with nogil:
        for i in range(n):
            v = x[i]
            t = _tanh(GELU_C * (v + GELU_A * v * v * v))
            dt = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            dx[i] = <real>(dy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dt))


def gelu_backward(x, dy):
    flat = np.ascontiguousarray(x).reshape(-1)
    g = np.ascontiguousarray(dy, dtype=flat.dtype).reshape(-1)
    dx = np.empty_like(flat)
    _gelu_bwd(flat, g, dx)
    return dx.reshape(x.shape)
