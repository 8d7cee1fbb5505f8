"""Toy segmentation transformer with a swappable token mixer.

Architecture: patch embedding + learned positions, ``layers`` pre-norm blocks
(mixer, then a GELU MLP of width 2d), a final layernorm and a per-token
linear classifier.  Token class probabilities are upsampled to pixels by
nearest-neighbour repetition.

Mixers
------
global   attention over all tokens
window   attention restricted to w x w token windows; with ``shift`` every
         second layer offsets the partition by w/2 (edge windows shrink, as
         in a masked cyclic shift)
pool     PoolFormer-style ``avgpool3x3(x) - x`` (no attention)
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .attention import AttentionConfig, AttentionTrace, attention_forward, init_attention_weights
from .rng import RngState
from .tensor import DimensionError, Tensor

MIXERS = ("global", "window", "pool")


@dataclass(frozen=True)
class SegModelConfig:
    img_h: int = 32
    img_w: int = 32
    patch: int = 4
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    classes: int = 8
    mixer: str = "global"
    window: int = 4
    shift: bool = True
    pool: int = 3
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        if self.mixer not in MIXERS:
            raise ValueError(f"unknown mixer {self.mixer!r}; expected one of {MIXERS}")
        if self.img_h % self.patch or self.img_w % self.patch:
            raise ValueError("image size must be divisible by the patch size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.mixer == "window" and (self.grid_h % self.window or self.grid_w % self.window):
            raise ValueError("token grid must be divisible by the window size")
        if self.mixer == "pool" and self.pool % 2 == 0:
            raise ValueError("pool window must be odd")
        att = self.attention
        if att.heads != self.heads or att.d_k != self.embed_dim // self.heads:
            object.__setattr__(self, "attention", dataclasses.replace(
                att, heads=self.heads, d_k=self.embed_dim // self.heads))

    @property
    def grid_h(self) -> int:
        return self.img_h // self.patch

    @property
    def grid_w(self) -> int:
        return self.img_w // self.patch

    @property
    def tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def tag(self) -> str:
        att = self.attention
        if self.mixer == "pool":
            return "pool"
        parts = [self.mixer, att.mode]
        if att.uses_mas:
            parts.append(f"T{att.threshold:g}")
        if att.uses_rad:
            parts.append(f"p{att.dropout:g}")
        return "-".join(parts)

    # flat key=value form used by checkpoints and experiment configs
    def to_items(self) -> list[tuple[str, str]]:
        items = [(f.name, str(getattr(self, f.name)))
                 for f in dataclasses.fields(self) if f.name != "attention"]
        items += [(f"attention.{f.name}", str(getattr(self.attention, f.name)))
                  for f in dataclasses.fields(self.attention)]
        return items

    @classmethod
    def from_items(cls, items) -> "SegModelConfig":
        top, att = {}, {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        att_types = {f.name: f.type for f in dataclasses.fields(AttentionConfig)}
        for key, value in items:
            if key.startswith("attention."):
                name = key.split(".", 1)[1]
                if name not in att_types:
                    raise ValueError(f"unknown attention key {name!r}")
                att[name] = _coerce(value, att_types[name])
            else:
                if key not in types or key == "attention":
                    raise ValueError(f"unknown model key {key!r}")
                top[key] = _coerce(value, types[key])
        return cls(attention=AttentionConfig(**att), **top)


def _coerce(value: str, typ) -> object:
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    if typ == "bool":
        if value not in ("True", "False", "true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {value!r}")
        return value in ("True", "true", "1")
    return value


@dataclass
class SegModel:
    cfg: SegModelConfig
    params: dict[str, np.ndarray]
    _frozen: dict = field(default_factory=dict, repr=False, compare=False)

    def tensors(self) -> dict[str, Tensor]:
        """Read-only Tensor views of the weights (cached)."""
        if not self._frozen:
            self._frozen.update({k: Tensor(v) for k, v in self.params.items()})
        return self._frozen

    def with_params(self, params: dict[str, np.ndarray]) -> "SegModel":
        return SegModel(self.cfg, {k: np.array(v, dtype=np.float64) for k, v in params.items()})

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def model_init(cfg: SegModelConfig, seed: int | RngState, std: float = 0.02) -> SegModel:
    rng = (seed if isinstance(seed, RngState) else RngState(int(seed))).child("init")
    d, p = cfg.embed_dim, cfg.patch
    params: dict[str, np.ndarray] = {
        "embed.w": rng.child("embed.w").normal((p * p * 3, d), std),
        "embed.b": np.zeros(d),
        "pos": rng.child("pos").normal((cfg.tokens, d), std),
    }
    for i in range(cfg.layers):
        pre = f"blocks.{i}."
        params[pre + "ln1.g"] = np.ones(d)
        params[pre + "ln1.b"] = np.zeros(d)
        if cfg.mixer != "pool":
            for k, v in init_attention_weights(cfg.attention, d, rng.child("attn", i), std).items():
                params[pre + "attn." + k] = v
        params[pre + "ln2.g"] = np.ones(d)
        params[pre + "ln2.b"] = np.zeros(d)
        params[pre + "mlp.w1"] = rng.child("mlp.w1", i).normal((d, 2 * d), std)
        params[pre + "mlp.b1"] = np.zeros(2 * d)
        params[pre + "mlp.w2"] = rng.child("mlp.w2", i).normal((2 * d, d), std)
        params[pre + "mlp.b2"] = np.zeros(d)
    params["head.ln.g"] = np.ones(d)
    params["head.ln.b"] = np.zeros(d)
    params["head.w"] = rng.child("head.w").normal((d, cfg.classes), std)
    params["head.b"] = np.zeros(cfg.classes)
    return SegModel(cfg, params)


# ---------------------------------------------------------------- mixer geometry

def window_valid(gh: int, gw: int, w: int, shift: int = 0) -> np.ndarray:
    """(N, N) bool: tokens i, j share a w x w window of the partition offset by ``shift``."""
    yy, xx = np.divmod(np.arange(gh * gw), gw)
    win = ((yy + shift) // w) * (gw // w + 1) + (xx + shift) // w
    return win[:, None] == win[None, :]


def pool_matrix(gh: int, gw: int, k: int) -> np.ndarray:
    """(N, N) averaging operator of a k x k, stride-1 pool without padding counts."""
    r = k // 2
    yy, xx = np.divmod(np.arange(gh * gw), gw)
    near = (np.abs(yy[:, None] - yy[None, :]) <= r) & (np.abs(xx[:, None] - xx[None, :]) <= r)
    return near / near.sum(axis=1, keepdims=True)


_GEOMETRY_CACHE: dict = {}


def _geometry(cfg: SegModelConfig, layer: int):
    shift = cfg.window // 2 if cfg.mixer == "window" and cfg.shift and layer % 2 else 0
    key = (cfg.mixer, cfg.grid_h, cfg.grid_w, cfg.window, cfg.pool, shift)
    if key not in _GEOMETRY_CACHE:
        if cfg.mixer == "window":
            _GEOMETRY_CACHE[key] = window_valid(cfg.grid_h, cfg.grid_w, cfg.window, shift)
        elif cfg.mixer == "pool":
            _GEOMETRY_CACHE[key] = pool_matrix(cfg.grid_h, cfg.grid_w, cfg.pool)
        else:
            _GEOMETRY_CACHE[key] = None
    return _GEOMETRY_CACHE[key]


# ---------------------------------------------------------------- forward

def model_forward(m: SegModel, x, mode: str = "eval", rng: RngState | None = None,
                  trace: AttentionTrace | None = None, *, params: dict | None = None,
                  logits: bool = False, rad: bool | None = None) -> Tensor:
    """Per-pixel class probabilities (or pre-softmax logits) for ``x``.

    ``x`` is (H, W, 3) or (B, H, W, 3) with values in [0, 1].  ``params``
    overrides the model weights (e.g. tracked Tensors during training).
    ``rad`` forces attention dropout on/off; by default it follows the
    attention config (always on in training, on at eval iff ``rad_at_eval``).
    """
    cfg = m.cfg
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x = x if isinstance(x, Tensor) else Tensor(x)
    single = x.ndim == 3
    if x.shape[-3:] != (cfg.img_h, cfg.img_w, 3):
        raise DimensionError(f"expected images of shape ({cfg.img_h}, {cfg.img_w}, 3), got {x.shape}")
    if single:
        x = ops.reshape(x, (1,) + x.shape)
    w = params if params is not None else m.tensors()
    att = cfg.attention
    if rad is None:
        rad = att.uses_rad and (mode == "train" or att.rad_at_eval)
    rad = bool(rad) and att.uses_rad
    if rad and rng is None:
        raise ValueError("attention dropout is active; pass an RngState")

    h = ops.linear(ops.patchify(x, cfg.patch), w["embed.w"], w["embed.b"])
    h = ops.add(h, w["pos"])
    for i in range(cfg.layers):
        geom = _geometry(cfg, i)
        pre = f"blocks.{i}."
        z = ops.layernorm(h, w[pre + "ln1.g"], w[pre + "ln1.b"])
        if cfg.mixer == "pool":
            z = ops.sub(ops.matmul(geom, z), z)
        else:
            aw = {k[len(pre) + 5:]: v for k, v in w.items() if k.startswith(pre + "attn.")}
            z = attention_forward(z, aw, att, rng.child("rad", i) if rad else None, trace,
                                  valid=geom, rad_active=rad)
        h = ops.add(h, z)
        z = ops.layernorm(h, w[pre + "ln2.g"], w[pre + "ln2.b"])
        z = ops.gelu(ops.linear(z, w[pre + "mlp.w1"], w[pre + "mlp.b1"]))
        h = ops.add(h, ops.linear(z, w[pre + "mlp.w2"], w[pre + "mlp.b2"]))

    z = ops.layernorm(h, w["head.ln.g"], w["head.ln.b"])
    z = ops.linear(z, w["head.w"], w["head.b"])                  # (B, N, C)
    if not logits:
        z = ops.softmax_rows(z)
    b = z.shape[0]
    z = ops.reshape(z, (b, cfg.grid_h, cfg.grid_w, cfg.classes))
    z = ops.upsample_nearest(z, cfg.patch)
    if single:
        z = ops.reshape(z, z.shape[1:])
    return z


def predict(m: SegModel, x: np.ndarray, rng: RngState | None = None) -> np.ndarray:
    """Eval-mode class map(s)."""
    return model_forward(m, x, "eval", rng).data.argmax(axis=-1)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"RAMLAB01"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, m: SegModel, extra: dict | None = None) -> None:
    """Binary layout (all integers little-endian)::

        b"RAMLAB01"
        u32 n, then n bytes of UTF-8 text: one key=value line per config entry
        u32 tensor count, then per tensor:
            u32 len + UTF-8 name, u32 rank, rank x u64 extents,
            prod(extents) float64 values (little-endian, row-major)
    """
    lines = [f"{k}={v}" for k, v in m.cfg.to_items()]
    lines += [f"meta.{k}={v}" for k, v in (extra or {}).items()]
    text = ("\n".join(lines) + "\n").encode("utf-8")
    buf = [MAGIC, struct.pack("<I", len(text)), text, struct.pack("<I", len(m.params))]
    for name in sorted(m.params):
        arr = np.ascontiguousarray(m.params[name], dtype="<f8")
        nb = name.encode("utf-8")
        buf.append(struct.pack("<I", len(nb)) + nb)
        buf.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.append(arr.tobytes())
    Path(path).write_bytes(b"".join(buf))


def load_checkpoint(path) -> tuple[SegModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated")
        out = raw[pos:pos + n]
        pos += n
        return out

    (tlen,) = struct.unpack("<I", take(4))
    items, meta = [], {}
    for line in take(tlen).decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            items.append((key, value))
    cfg = SegModelConfig.from_items(items)
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return SegModel(cfg, params), meta
