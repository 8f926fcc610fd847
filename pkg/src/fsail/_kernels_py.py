"""Pure numpy reference kernels.

Every function takes and returns C-contiguous float64 arrays of shape
``(rows, cols)``; callers reshape higher-rank tensors before dispatch.
The compiled module ``fsail._kernels`` exposes the same names.
"""

import numpy as np

_GELU_C = 0.7978845608028654  # sqrt(2 / pi)


def softmax_rows_forward(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layer_norm_forward(x, gain, bias, eps):
    """Returns ``(out, xhat, rstd)``; the last two are saved for backward."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0].copy()


def layer_norm_backward(gy, xhat, rstd, gain):
    """Returns ``(gx, ggain, gbias)``."""
    c = xhat.shape[1]
    gxhat = gy * gain
    m1 = gxhat.sum(axis=1, keepdims=True)
    m2 = (gxhat * xhat).sum(axis=1, keepdims=True)
    gx = (c * gxhat - m1 - xhat * m2) * (rstd[:, None] / c)
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    return gx, ggain, gbias


def gelu_forward(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def gelu_backward(x, gy):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def log_softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
