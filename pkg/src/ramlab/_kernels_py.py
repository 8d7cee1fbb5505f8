"""Pure numpy reference kernels.

Same signatures as the compiled ``_kernels`` module.  All inputs are 2-D
C-contiguous float64 arrays whose last axis is the reduction axis.
"""

import numpy as np

GELU_K = np.sqrt(2.0 / np.pi)
GELU_C = 0.044715


def softmax_rows(a, mask=None):
    """Row softmax.  ``mask`` is an ``(m, n)`` uint8 array reused cyclically
    over the rows of ``a``; masked entries get probability exactly 0."""
    if mask is None:
        z = a - a.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    m = mask.shape[0]
    keep = np.tile(mask.astype(bool), (a.shape[0] // m, 1))
    z = np.where(keep, a, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def layernorm_forward(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0].copy()


def layernorm_backward(g, xhat, rstd, gain):
    gx = g * gain
    n = xhat.shape[1]
    dx = (rstd[:, None] / n) * (
        n * gx - gx.sum(axis=1, keepdims=True) - xhat * (gx * xhat).sum(axis=1, keepdims=True)
    )
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def gelu_forward(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_K * (x + GELU_C * x**3)))


def gelu_backward(x, g):
    u = GELU_K * (x + GELU_C * x**3)
    t = np.tanh(u)
    du = GELU_K * (1.0 + 3.0 * GELU_C * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def saturate_forward(x):
    return x / (1.0 + np.abs(x))


def saturate_backward(x, g):
    d = 1.0 + np.abs(x)
    return g / (d * d)
