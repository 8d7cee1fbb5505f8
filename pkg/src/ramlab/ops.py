"""Differentiable ops over :class:`~ramlab.tensor.Tensor`.

Binary elementwise ops broadcast numpy-style with the smaller operand
right-aligned against the larger one; gradients are summed back over the
expanded axes.  Row-wise kernels (softmax, layernorm, GELU, saturate) go
through :mod:`ramlab.kernels`.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import DimensionError, DomainError, Tensor, as_tensor, record

LN_EPS = 1e-5


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> tuple:
    sa, sb = a.shape, b.shape
    if len(sb) > len(sa):
        sa, sb = sb, sa
    for x, y in zip(sa[len(sa) - len(sb):], sb):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast")
    return np.broadcast_shapes(a.shape, b.shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape) if a.tracked else None,
                             _unbroadcast(g * a.data, b.shape) if b.tracked else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if (b.data == 0).any():
        raise DomainError("div: division by zero")
    out = a.data / b.data
    return record("div", out, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape) if a.tracked else None,
                             _unbroadcast(-g * out / b.data, b.shape) if b.tracked else None))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported by record()
        out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise DomainError("log of non-positive value")
    return record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); zero gradient where the floor is active."""
    a = as_tensor(a)
    keep = a.data >= floor
    return record("clamp_min", np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    sign = np.sign(a.data)
    return record("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return record("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    return record("gelu", kernels.gelu_forward(a.data), (a,),
                  lambda g: (kernels.gelu_backward(a.data, g),))


def saturate(a) -> Tensor:
    """x / (1 + |x|), strictly inside (-1, 1)."""
    a = as_tensor(a)
    return record("saturate", kernels.saturate_forward(a.data), (a,),
                  lambda g: (kernels.saturate_backward(a.data, g),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``a @ b`` over the last two axes; leading axes broadcast (weights may be 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: {exc}") from None

    def vjp(g):
        da = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.tracked else None
        if b.tracked:
            db = np.matmul(np.swapaxes(a.data, -1, -2), g)
            db = _unbroadcast(db, b.shape)
        else:
            db = None
        return da, db

    return record("matmul", out, (a, b), vjp)


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b) with ``w`` of shape (in, out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def swap_last(a) -> Tensor:
    return transpose(a, tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", np.transpose(a.data, axes), (a,),
                  lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


# ---------------------------------------------------------------- reductions

def _axes(a: Tensor, axis):
    if axis is None:
        return tuple(range(a.ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.ndim if a.ndim else ax for ax in axes)
    if any(ax < 0 or ax >= max(a.ndim, 1) for ax in axes):
        raise DimensionError(f"reduction axes {axis} invalid for shape {a.shape}")
    return axes


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _axes(a, axis)
    if a.size == 0:
        raise DimensionError("empty reduction")
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(a, axis)
    count = int(np.prod([a.shape[ax] for ax in axes])) if a.ndim else 1
    if count == 0:
        raise DimensionError("empty reduction")
    return scale(sum(a, axes, keepdims), 1.0 / count)


def variance(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by the element count)."""
    a = as_tensor(a)
    axes = _axes(a, axis)
    if a.size == 0:
        raise DimensionError("empty reduction")
    mu = mean(a, axes, keepdims=True)
    return mean(square(sub(a, mu)), axes, keepdims)


def logsumexp(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(np.log(s) + m, axis=axis)
    soft = e / s
    return record("logsumexp", out, (a,), lambda g: (np.expand_dims(g, axis) * soft,))


# ---------------------------------------------------------------- row kernels

def softmax_rows(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (bool, shape ``(rows, cols)`` of the trailing matrix) excludes
    entries: they receive probability exactly 0 and no gradient.
    """
    a = as_tensor(a)
    if a.ndim < 1:
        raise DimensionError("softmax needs rank >= 1")
    if mask is not None and a.ndim < 2:
        raise DimensionError("masked softmax needs rank >= 2")
    y = kernels.softmax_lastaxis(a.data, mask)
    return record("softmax", y, (a,), lambda g: (kernels.softmax_lastaxis_backward(y, g),))


def layernorm(a, gain, bias, eps: float = LN_EPS) -> Tensor:
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError("layernorm gain/bias must match the last axis")
    y, xhat, rstd = kernels.layernorm_forward(a.data, gain.data, bias.data, eps)

    def vjp(g):
        dx, dg, db = kernels.layernorm_backward(g, xhat, rstd, gain.data)
        return dx, dg, db

    return record("layernorm", y, (a, gain, bias), vjp)


# ---------------------------------------------------------------- image plumbing

def patchify(x, p: int) -> Tensor:
    """(..., H, W, ch) -> (..., (H/p)*(W/p), p*p*ch), tokens in row-major grid order."""
    x = as_tensor(x)
    *lead, h, w, ch = x.shape
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch {p}")
    gh, gw = h // p, w // p
    nl = len(lead)
    t = x.data.reshape(*lead, gh, p, gw, p, ch)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    out = np.transpose(t, perm).reshape(*lead, gh * gw, p * p * ch)
    inv = tuple(np.argsort(perm))

    def vjp(g):
        gt = g.reshape(*lead, gh, gw, p, p, ch)
        return (np.transpose(gt, inv).reshape(x.shape),)

    return record("patchify", out, (x,), vjp)


def upsample_nearest(a, factor: int) -> Tensor:
    """(..., h, w, C) -> (..., h*f, w*f, C) by block repetition."""
    a = as_tensor(a)
    f = int(factor)
    out = np.repeat(np.repeat(a.data, f, axis=-3), f, axis=-2)

    def vjp(g):
        *lead, hh, ww, c = g.shape
        gt = g.reshape(*lead, hh // f, f, ww // f, f, c)
        return (gt.sum(axis=(-4, -2)),)

    return record("upsample", out, (a,), vjp)


def translate(a, dy: int, dx: int) -> Tensor:
    """Shift (..., H, W, ch) content by (dy, dx) pixels with zero fill."""
    a = as_tensor(a)
    out = _shift(a.data, dy, dx)
    return record("translate", out, (a,), lambda g: (_shift(g, -dy, -dx),))


def _shift(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(x)
    h, w = x.shape[-3], x.shape[-2]
    if abs_int(dy) >= h or abs_int(dx) >= w:
        return out
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd, :] = x[..., ys, xs, :]
    return out


def abs_int(v: int) -> int:
    return -v if v < 0 else v


def stack(items, axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    if not items:
        raise DimensionError("stack of nothing")
    out = np.stack([t.data for t in items], axis=axis)
    return record("stack", out, items,
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(items))))
