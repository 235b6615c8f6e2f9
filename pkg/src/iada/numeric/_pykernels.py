"""NumPy implementations of the row-wise kernels.

Every function takes and returns C-contiguous 2-D arrays (rows are the
reduction axis) or flat arrays for the elementwise ones. The compiled module
``_ckernels`` exposes the same names and signatures.
"""

import numpy as np

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def softmax_forward(x, mask=None):
    if mask is None:
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
        return e / e.sum(axis=1, keepdims=True)
    mask = mask.astype(bool, copy=False)
    m = np.max(np.where(mask, x, -np.inf), axis=1, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    e = np.exp(np.where(mask, x - m, -np.inf))
    s = e.sum(axis=1, keepdims=True)
    s[s == 0] = 1.0
    return e / s


def softmax_backward(p, dp):
    return p * (dp - (p * dp).sum(axis=1, keepdims=True))


def layernorm_forward(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0].copy()


def layernorm_backward(dxhat, xhat, rstd):
    n = xhat.shape[1]
    a = dxhat.mean(axis=1, keepdims=True)
    b = (dxhat * xhat).sum(axis=1, keepdims=True) / n
    return (dxhat - a - xhat * b) * rstd[:, None]


def gelu_forward(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t)


def gelu_backward(x, dy):
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    dt = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)
