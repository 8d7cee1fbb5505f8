"""Dense float64 tensors with a dynamic reverse-mode tape.

A :class:`Tape` is an append-only list of recorded operations.  Tensors that
should receive gradients are registered with :meth:`Tape.watch`; any op whose
inputs include a watched tensor (directly or transitively) appends an entry
holding its vector-Jacobian product.  :func:`backward` walks the entries in
reverse once and returns a :class:`Gradients` map.

Tensors are immutable.  Every op checks its output for NaN/Inf and raises
:class:`NonFiniteError` instead of propagating it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TapeEntry:
    kind: str
    inputs: tuple  # node ids, None where the input is untracked
    output: int
    vjp: Callable | None


@dataclass
class Tape:
    entries: list[TapeEntry] = field(default_factory=list)

    def watch(self, t: "Tensor | np.ndarray | float") -> "Tensor":
        """Return a tracked leaf copy of ``t``."""
        data = t.data if isinstance(t, Tensor) else t
        out = Tensor(data)
        out.tape = self
        out.node = self._append("leaf", (), None)
        return out

    def _append(self, kind, inputs, vjp) -> int:
        node = len(self.entries)
        self.entries.append(TapeEntry(kind, inputs, node, vjp))
        return node

    def reset(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


class Tensor:
    """Immutable n-d float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("non-finite value in tensor")
        arr.flags.writeable = False
        self.data = arr
        self.tape: Tape | None = None
        self.node: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # no copy, no check; caller owns ``arr``
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.tape = None
        t.node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})\n{self.data}"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    @property
    def T(self):
        from . import ops
        return ops.swap_last(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(kind: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Build an op output and, if any parent is tracked, log it on the tape.

    ``vjp(g)`` must return one gradient array (or None) per parent.
    """
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{kind}: non-finite output")
    out = Tensor._wrap(np.asarray(data, dtype=np.float64))
    tape = None
    for p in parents:
        if p.node is not None:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise ValueError(f"{kind}: inputs recorded on different tapes")
    if tape is not None:
        out.tape = tape
        out.node = tape._append(kind, tuple(p.node for p in parents), vjp)
    return out


class Gradients:
    """Gradient map returned by :func:`backward`, keyed by tracked tensors."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.node is None or t.tape is not self._tape:
            raise KeyError("tensor is not tracked on this tape")
        g = self._grads.get(t.node)
        return np.zeros(t.shape) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return t.node is not None and t.tape is self._tape and t.node in self._grads


def backward(loss: Tensor, seed: np.ndarray | float | None = None) -> Gradients:
    """Reverse pass from a scalar ``loss``.

    The tape is left intact so that several losses built on the same forward
    pass can be differentiated separately; call ``tape.reset()`` to discard.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ValueError("loss is not on a tape (no watched inputs reached it)")
    tape = loss.tape
    grads: dict[int, np.ndarray] = {
        loss.node: np.ones(loss.shape) if seed is None else np.asarray(seed, dtype=np.float64)
    }
    for entry in reversed(tape.entries[: loss.node + 1]):
        g = grads.get(entry.output)
        if g is None or entry.vjp is None:
            continue
        in_grads = entry.vjp(g)
        for node, gi in zip(entry.inputs, in_grads):
            if node is None or gi is None:
                continue
            if not np.isfinite(gi).all():
                raise NonFiniteError(f"non-finite gradient through {entry.kind}")
            prev = grads.get(node)
            grads[node] = gi if prev is None else prev + gi
        if entry.output != loss.node:
            del grads[entry.output]
    leaves = {e.output for e in tape.entries if e.kind == "leaf"}
    return Gradients(tape, {k: v for k, v in grads.items() if k in leaves})


def grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and gradient of scalar ``f`` at ``x``."""
    tape = Tape()
    xt = tape.watch(x)
    y = f(xt)
    return y.item(), backward(y)[xt]


def finite_diff_check(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-6,
                      coords: Sequence[int] | None = None) -> float:
    """Max-norm relative error between ``backward`` and central differences.

    ``|g_ad - g_fd|_inf / max(|g_ad|_inf, |g_fd|_inf)`` over the checked
    coordinates (all of them unless ``coords`` picks a subset of flat
    indices).  ``f`` must be deterministic.
    """
    x = np.array(x, dtype=np.float64)
    _, g = grad(f, x)
    g = g.ravel()
    idx = range(x.size) if coords is None else coords
    ad = np.empty(len(idx))
    fd = np.empty(len(idx))
    flat = x.ravel()
    for k, i in enumerate(idx):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = f(Tensor(xp.reshape(x.shape))).item()
        fm = f(Tensor(xm.reshape(x.shape))).item()
        fd[k] = (fp - fm) / (2.0 * step)
        ad[k] = g[i]
    scale = max(np.abs(ad).max(initial=0.0), np.abs(fd).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(ad - fd).max() / scale)
