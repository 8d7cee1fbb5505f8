"""Self-attention with optional refinement of the attention matrix.

Modes
-----
baseline     M = softmax(A)
mas          M = softmax(mas_transform(A))          (max entry of M <= T)
rad          M' = dropout(softmax(A))               (kept on at evaluation)
ram          M' = dropout(softmax(mas_transform(A)))
learnable    M = softmax(s_h * A), one trainable scalar per head
temperature  M = softmax(A / tau)

``A = Q K^T / sqrt(d_k)`` per head.  Dropout uses inverted scaling, so the
expected value of M' equals M.  Local (windowed) attention is expressed as
attention with a boolean validity mask; masked entries are excluded from the
softmax and the MAS bound uses the per-row count of valid keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .rng import RngState
from .tensor import DimensionError, Tensor

MODES = ("baseline", "mas", "rad", "ram", "learnable", "temperature")


@dataclass(frozen=True)
class AttentionConfig:
    mode: str = "baseline"
    threshold: float = 0.3
    dropout: float = 0.5
    temperature: float = 2.0
    heads: int = 2
    d_k: int = 16
    rad_at_eval: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown attention mode {self.mode!r}; expected one of {MODES}")
        if self.uses_mas and not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.uses_rad and not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.mode == "temperature" and not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.heads < 1 or self.d_k < 1:
            raise ValueError("heads and d_k must be positive")

    @property
    def uses_mas(self) -> bool:
        return self.mode in ("mas", "ram")

    @property
    def uses_rad(self) -> bool:
        return self.mode in ("rad", "ram")


@dataclass
class LayerTrace:
    """Matrices recorded for one attention layer, shape (..., heads, N, N)."""

    logits: Tensor                      # A (also the key/query similarity B)
    probs: Tensor                       # M, before dropout
    transformed: Tensor | None = None   # A' under mas/ram
    dropped: Tensor | None = None       # M' under rad/ram
    valid: np.ndarray | None = None     # (N, N) bool, None = all pairs valid


@dataclass
class AttentionTrace:
    layers: list[LayerTrace] = field(default_factory=list)

    def __len__(self):
        return len(self.layers)


def mas_bound(threshold: float, n) -> np.ndarray | float:
    """log((n - 1) T / (1 - T)), the upper end of the transformed range."""
    return np.log((np.asarray(n, dtype=np.float64) - 1.0) * threshold / (1.0 - threshold))


def mas_transform(a, threshold: float, n) -> Tensor:
    """A' = (saturate(A) + 1) / 2 * log((n - 1) T / (1 - T)).

    ``n`` is the number of keys each row attends over: an int, or an array
    broadcastable against ``a`` (e.g. shape (N, 1) for windowed rows).
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    n_arr = np.asarray(n)
    if (n_arr < 2).any():
        raise ValueError("mas_transform needs at least 2 tokens per row")
    bound = mas_bound(threshold, n_arr)
    half = ops.scale(ops.add(ops.saturate(a), 1.0), 0.5)
    if np.ndim(bound) == 0:
        return ops.scale(half, float(bound))
    return ops.mul(half, bound)


def rad_apply(m, p: float, rng: RngState | None, active: bool = True) -> Tensor:
    """Zero each entry with probability ``p``; survivors scaled by 1/(1-p)."""
    m = m if isinstance(m, Tensor) else Tensor(m)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout must lie in [0, 1), got {p}")
    if not active or p == 0.0:
        return m
    if rng is None:
        raise ValueError("attention dropout needs an RngState")
    keep = rng.uniform(m.shape) >= p
    return ops.mul(m, keep / (1.0 - p))


def _rad_heads(m: Tensor, p: float, rng: RngState | None) -> Tensor:
    # one substream per head; m has shape (..., heads, N, N)
    if p == 0.0:
        return m
    if rng is None:
        raise ValueError("attention dropout needs an RngState")
    heads = m.shape[-3]
    lead = m.shape[:-3]
    keep = np.empty(m.shape, dtype=bool)
    for h in range(heads):
        keep[..., h, :, :] = rng.child(h).uniform(lead + m.shape[-2:]) >= p
    return ops.mul(m, keep / (1.0 - p))


def init_attention_weights(cfg: AttentionConfig, dim: int, rng: RngState, std: float = 0.02) -> dict:
    inner = cfg.heads * cfg.d_k
    w = {
        "wq": rng.child("wq").normal((dim, inner), std),
        "wk": rng.child("wk").normal((dim, inner), std),
        "wv": rng.child("wv").normal((dim, inner), std),
        "wo": rng.child("wo").normal((inner, dim), std),
        "bo": np.zeros(dim),
    }
    if cfg.mode == "learnable":
        w["scale"] = np.ones(cfg.heads)
    return w


def attention_forward(x, weights: dict, cfg: AttentionConfig, rng: RngState | None = None,
                      trace: AttentionTrace | None = None, *, valid: np.ndarray | None = None,
                      rad_active: bool = True) -> Tensor:
    """Multi-head attention over tokens ``x`` of shape (..., N, C).

    ``weights`` maps names to Tensors (or arrays).  ``valid`` restricts which
    key positions each query may attend to.  ``rad_active`` turns attention
    dropout off (modes rad/ram only).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    w = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in weights.items()}
    h, dk = cfg.heads, cfg.d_k
    *lead, n, c = x.shape
    if w["wq"].shape != (c, h * dk) or w["wk"].shape != (c, h * dk):
        raise DimensionError(f"query/key weights must be ({c}, {h * dk})")
    if w["wv"].shape[0] != c or w["wv"].shape[1] % h:
        raise DimensionError("value weights inconsistent with heads")
    dv = w["wv"].shape[1] // h
    nl = len(lead)

    def split(t, d):
        t = ops.reshape(t, (*lead, n, h, d))
        return ops.transpose(t, tuple(range(nl)) + (nl + 1, nl, nl + 2))

    q = split(ops.matmul(x, w["wq"]), dk)
    k = split(ops.matmul(x, w["wk"]), dk)
    v = split(ops.matmul(x, w["wv"]), dv)
    logits = ops.scale(ops.matmul(q, ops.swap_last(k)), 1.0 / math.sqrt(dk))

    transformed = None
    if cfg.uses_mas:
        counts = n if valid is None else valid.sum(axis=1, keepdims=True)
        # a row with a single key gets weight 1 whatever its logit; any bound will do
        counts = np.maximum(counts, 2)
        transformed = mas_transform(logits, cfg.threshold, counts)
        pre = transformed
    elif cfg.mode == "temperature":
        pre = ops.scale(logits, 1.0 / cfg.temperature)
    elif cfg.mode == "learnable":
        pre = ops.mul(logits, ops.reshape(w["scale"], (h, 1, 1)))
    else:
        pre = logits
    probs = ops.softmax_rows(pre, valid)

    dropped = None
    mixed = probs
    if cfg.uses_rad and rad_active:
        dropped = _rad_heads(probs, cfg.dropout, rng)
        mixed = dropped

    y = ops.matmul(mixed, v)                                   # (..., h, N, dv)
    y = ops.transpose(y, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    y = ops.reshape(y, (*lead, n, h * dv))
    y = ops.add(ops.matmul(y, w["wo"]), w["bo"])

    if trace is not None:
        trace.layers.append(LayerTrace(logits, probs, transformed, dropped, valid))
    return y


def max_bound_check(trace: AttentionTrace, threshold: float, tol: float = 1e-9) -> bool:
    """True iff every recorded (pre-dropout) attention matrix has max <= T."""
    if not trace.layers:
        raise ValueError("trace holds no attention matrices")
    for layer in trace.layers:
        if layer.probs is None:
            raise ValueError("trace layer is missing the normalized matrix")
        if layer.probs.data.max() > threshold + tol:
            return False
    return True
