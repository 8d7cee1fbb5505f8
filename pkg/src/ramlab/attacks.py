"""Patch attacks on segmentation models.

All methods share one loop: compute the method's loss on the current image,
take its input gradient ``r``, keep only the patch region, rescale so the
largest entry equals ``gamma`` and add it, then clip to [0, 1]::

    r' = gamma / ||r * mask||_inf * (r * mask)
    x  = clip(x + r', 0, 1)

Every loss is written so that *larger means a more successful attack* (the
loop only ascends).  DAG's usual form ``Y_gt - Y_target`` is therefore
negated here, and IPatch ascends the negative KL divergence.

Patch-Fool is the one method whose update is defined on gradients rather
than on a scalar loss: per layer, the attention-loss gradient is combined with
the cross-entropy gradient after removing the conflicting component.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .attention import AttentionTrace
from .data import PatchMask
from .metrics import MetricsReport, evaluate
from .model import SegModel, model_forward
from .rng import RngState
from .targets import AttackTarget
from .tensor import NonFiniteError, Tape, Tensor, backward

METHODS = ("pgd", "dag", "ipatch", "ssap", "patchfool", "attnfool", "eot", "maxvardag", "maxattndag")
ATTENTION_METHODS = ("patchfool", "attnfool", "maxvardag", "maxattndag")
DAG_FAMILY = ("dag", "maxvardag", "maxattndag")
LOG_FLOOR = 1e-12
IPATCH_EPS = 1e-10


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    method: str = "dag"
    steps: int = 400
    gamma: float | None = None       # None: 0.005 for pgd, 1.0 otherwise
    alpha: float = 0.5
    eot_samples: int = 4
    eot_shift: int = 2
    eot_noise: float = 0.01
    layers: tuple | None = None      # attention layers used by the adaptive losses

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}; expected one of {METHODS}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.eot_samples < 1:
            raise ValueError("eot_samples must be >= 1")

    @property
    def step_size(self) -> float:
        if self.gamma is not None:
            return self.gamma
        return 0.005 if self.method == "pgd" else 1.0


@dataclass
class AttackResult:
    adversarial: np.ndarray
    losses: list[float]
    report: MetricsReport | None
    iterations: int
    step_norms: list[float] = field(default_factory=list)
    prediction: np.ndarray | None = None
    seconds: float = 0.0

    def record(self, spec: AttackSpec, extra: dict | None = None) -> dict:
        """JSON-ready summary (spec echo, loss trace, final metrics)."""
        out = {
            "spec": dataclasses.asdict(spec) | {"gamma": spec.step_size},
            "iterations": self.iterations,
            "losses": [float(v) for v in self.losses],
            "metrics": None if self.report is None else {
                "miou_gt": self.report.miou_gt,
                "miou_target": self.report.miou_target,
                "pacc_masked": self.report.pacc_masked,
            },
        }
        if extra:
            out.update(extra)
        return out


# ---------------------------------------------------------------- helpers

def _onehot(labels: np.ndarray, classes: int) -> np.ndarray:
    return np.eye(classes)[labels]


def _pick(y: Tensor, labels: np.ndarray) -> Tensor:
    """Y[i, j, labels[i, j]] as an (H, W) tensor."""
    return ops.sum(ops.mul(y, _onehot(labels, y.shape[-1])), axis=-1)


def _safe_log(p: Tensor) -> Tensor:
    return ops.log(ops.clamp_min(p, LOG_FLOOR))


def patch_tokens(mask, patch: int) -> np.ndarray:
    """Indices of tokens whose pixel footprint intersects the mask."""
    mask = np.asarray(getattr(mask, "mask", mask), dtype=bool)
    h, w = mask.shape
    cells = mask.reshape(h // patch, patch, w // patch, patch).any(axis=(1, 3))
    return np.flatnonzero(cells.ravel())


def masked_step(grad: np.ndarray, mask: np.ndarray, gamma: float) -> np.ndarray:
    """Algorithm-1 update ``gamma / ||r * mask||_inf * (r * mask)``.

    ``grad`` is (H, W, 3) or (B, H, W, 3); normalisation is per image.  A
    zero masked gradient yields a zero step.
    """
    mask3 = np.asarray(mask, dtype=np.float64)[..., None]
    r = grad * mask3
    if r.ndim == 3:
        n = np.abs(r).max()
        return r * (gamma / n) if n > 0 else np.zeros_like(r)
    n = np.abs(r).reshape(r.shape[0], -1).max(axis=1)
    safe = np.where(n > 0, n, 1.0)
    return r * (np.where(n > 0, gamma / safe, 0.0))[:, None, None, None]


def _layers(trace: AttentionTrace, spec_layers) -> list:
    if spec_layers is None:
        return trace.layers
    return [trace.layers[i] for i in spec_layers]


# ---------------------------------------------------------------- losses

def loss_pgd(y: Tensor, target: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Sum over pixels of log Y[target] (optionally weighted per pixel)."""
    lp = _safe_log(_pick(y, target))
    if weight is not None:
        lp = ops.mul(lp, weight)
    return ops.sum(lp)


def dag_active(y: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return y.argmax(axis=-1) == gt


def loss_dag(y: Tensor, gt: np.ndarray, target: np.ndarray) -> tuple[Tensor, int]:
    """Ascent form of DAG: sum over still-correct pixels of Y[target] - Y[gt].

    Returns the loss and the size of the active set.
    """
    active = dag_active(y.data, gt)
    diff = ops.sub(_pick(y, target), _pick(y, gt))
    return ops.sum(ops.mul(diff, active.astype(np.float64))), int(active.sum())


def loss_ipatch(y: Tensor, target: np.ndarray, eps: float = IPATCH_EPS) -> Tensor:
    """Negative KL(onehot(target) || Y); zero-weight classes contribute nothing."""
    # onehot * log((onehot + eps) / Y) only survives at the target class
    kl = ops.sub(np.log(1.0 + eps), _safe_log(_pick(y, target)))
    return ops.scale(ops.sum(kl), -1.0)


def loss_ssap(y: Tensor, target: np.ndarray) -> tuple[Tensor, float]:
    """eta * sum_{unsuccessful} log Y_t + (1 - eta) * sum_{successful} log Y_t."""
    pending = y.data.argmax(axis=-1) != target
    eta = pending.mean()
    weight = np.where(pending, eta, 1.0 - eta)
    return loss_pgd(y, target, weight), float(eta)


def attention_patch_mass(trace: AttentionTrace, tokens: np.ndarray, layers=None) -> list[Tensor]:
    """Per layer: sum over heads and queries of attention paid to patch tokens."""
    if len(tokens) == 0:
        raise ValueError("patch covers no token")
    out = []
    for layer in _layers(trace, layers):
        sel = np.zeros(layer.probs.shape[-1])
        sel[tokens] = 1.0
        out.append(ops.sum(ops.mul(layer.probs, sel)))
    return out


def patchfool_direction(g_ce: np.ndarray, g_attn: list[np.ndarray], alpha: float) -> np.ndarray:
    """g_ce + alpha * sum_l (g_l - beta_l g_ce), beta_l = 0 when <g_ce, g_l> > 0
    and the projection ratio <g_ce, g_l> / |g_ce|^2 otherwise."""
    total = np.array(g_ce, dtype=np.float64, copy=True)
    norm2 = float(np.vdot(g_ce, g_ce))
    for g in g_attn:
        dot = float(np.vdot(g_ce, g))
        beta = 0.0 if dot > 0 or norm2 == 0.0 else dot / norm2
        total = total + alpha * (g - beta * g_ce)
    return total


def kq_loss(trace: AttentionTrace, tokens: np.ndarray, layers=None) -> Tensor:
    """log sum_l exp(log sum_h exp(mean_j sum_{p in patch} B_jp))."""
    if len(tokens) == 0:
        raise ValueError("patch covers no token")
    per_layer = []
    for layer in _layers(trace, layers):
        b = layer.logits
        n = b.shape[-1]
        sel = np.zeros((n, n))
        sel[:, tokens] = 1.0
        if layer.valid is not None:
            sel = sel * layer.valid
        col = ops.scale(ops.sum(ops.mul(b, sel), axis=(-2, -1)), 1.0 / n)   # (..., heads)
        col = ops.reshape(col, (-1,))
        per_layer.append(ops.logsumexp(col, axis=-1))
    return ops.logsumexp(ops.stack(per_layer), axis=-1)


def loss_attnfool(y: Tensor, target: np.ndarray, trace: AttentionTrace, tokens, alpha: float,
                  layers=None) -> Tensor:
    base = loss_pgd(y, target)
    if alpha == 0.0 or not trace.layers:
        return base
    return ops.add(base, ops.scale(kq_loss(trace, tokens, layers), alpha))


def attention_variance(trace: AttentionTrace, layers=None) -> Tensor:
    """Mean over layers of the variance of all entries of M (all heads)."""
    sel = _layers(trace, layers)
    parts = [ops.variance(layer.probs) for layer in sel]
    out = parts[0]
    for p in parts[1:]:
        out = ops.add(out, p)
    return ops.scale(out, 1.0 / len(parts))


def loss_maxvardag(y: Tensor, gt, target, trace: AttentionTrace, alpha: float,
                   layers=None) -> tuple[Tensor, int]:
    base, active = loss_dag(y, gt, target)
    if alpha == 0.0 or not trace.layers:
        return base, active
    return ops.add(base, ops.scale(attention_variance(trace, layers), alpha)), active


def received_attention(trace: AttentionTrace, layers=None) -> Tensor:
    """Column sums sum_i M_ij averaged over layers and heads, shape (N,)."""
    sel = _layers(trace, layers)
    out = None
    for layer in sel:
        col = ops.sum(layer.probs, axis=-2)                       # (..., heads, N)
        col = ops.mean(ops.reshape(col, (-1, col.shape[-1])), axis=0)
        out = col if out is None else ops.add(out, col)
    return ops.scale(out, 1.0 / len(sel))


def attention_on_patch(trace: AttentionTrace, mask, patch: int, grid: tuple, layers=None) -> Tensor:
    """resize(column sums) * mask, summed, in token units (divided by patch**2)."""
    mask = np.asarray(getattr(mask, "mask", mask), dtype=np.float64)
    col = ops.reshape(received_attention(trace, layers), (grid[0], grid[1], 1))
    up = ops.upsample_nearest(col, patch)
    return ops.scale(ops.sum(ops.mul(up, mask[..., None])), 1.0 / (patch * patch))


def loss_maxattndag(y: Tensor, gt, target, trace: AttentionTrace, mask, alpha: float, patch: int,
                    grid: tuple, layers=None) -> tuple[Tensor, int]:
    base, active = loss_dag(y, gt, target)
    if alpha == 0.0 or not trace.layers:
        return base, active
    reg = attention_on_patch(trace, mask, patch, grid, layers)
    return ops.add(base, ops.scale(reg, alpha)), active


def eot_transforms(spec: AttackSpec, rng: RngState, shape) -> list[tuple[int, int, np.ndarray]]:
    out = []
    for k in range(spec.eot_samples):
        gen = rng.child("eot", k).generator()
        dy, dx = (int(v) for v in gen.integers(-spec.eot_shift, spec.eot_shift + 1, size=2))
        noise = gen.normal(0.0, spec.eot_noise, shape) if spec.eot_noise > 0 else np.zeros(shape)
        out.append((dy, dx, noise))
    return out


def _shift_labels(labels: np.ndarray, dy: int, dx: int) -> tuple[np.ndarray, np.ndarray]:
    h, w = labels.shape
    out = np.zeros_like(labels)
    valid = np.zeros((h, w))
    ys = slice(max(0, -dy), min(h, h - dy))
    yd = slice(max(0, dy), min(h, h + dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    xd = slice(max(0, dx), min(w, w + dx))
    out[yd, xd] = labels[ys, xs]
    valid[yd, xd] = 1.0
    return out, valid


def loss_eot(m: SegModel, x: Tensor, target: np.ndarray, spec: AttackSpec, rng: RngState,
             transforms=None) -> Tensor:
    """Mean PGD loss over random translations (zero fill) plus pixel noise.

    The target map is shifted with the image; pixels shifted in from outside
    carry no weight.  Each sample draws its own attention-dropout mask.
    """
    if transforms is None:
        transforms = eot_transforms(spec, rng, x.shape)
    total = None
    for k, (dy, dx, noise) in enumerate(transforms):
        xk = ops.add(ops.translate(x, dy, dx), noise)
        yk = model_forward(m, xk, "eval", rng.child("eot-rad", k))
        tk, wk = _shift_labels(target, dy, dx)
        lk = loss_pgd(yk, tk, None if (dy, dx) == (0, 0) else wk)
        total = lk if total is None else ops.add(total, lk)
    return ops.scale(total, 1.0 / len(transforms))


# ---------------------------------------------------------------- attack loop

def _objective(m: SegModel, xt: Tensor, spec: AttackSpec, gt, target, mask: PatchMask,
               tokens, rng: RngState):
    """Returns (ascent gradient, loss value, dag active count or None)."""
    cfg = m.cfg
    if spec.method == "eot":
        loss = loss_eot(m, xt, target, spec, rng)
        return backward(loss)[xt], loss.item(), None
    trace = AttentionTrace()
    y = model_forward(m, xt, "eval", rng, trace)
    active = None
    if spec.method == "pgd":
        loss = loss_pgd(y, target)
    elif spec.method == "dag":
        loss, active = loss_dag(y, gt, target)
    elif spec.method == "ipatch":
        loss = loss_ipatch(y, target)
    elif spec.method == "ssap":
        loss, _ = loss_ssap(y, target)
    elif spec.method == "attnfool":
        loss = loss_attnfool(y, target, trace, tokens, spec.alpha, spec.layers)
    elif spec.method == "maxvardag":
        loss, active = loss_maxvardag(y, gt, target, trace, spec.alpha, spec.layers)
    elif spec.method == "maxattndag":
        loss, active = loss_maxattndag(y, gt, target, trace, mask, spec.alpha, cfg.patch,
                                       (cfg.grid_h, cfg.grid_w), spec.layers)
    else:  # patchfool
        loss = loss_pgd(y, target)
        g_ce = backward(loss)[xt]
        if spec.alpha == 0.0 or not trace.layers:
            return g_ce, loss.item(), None
        mask3 = mask.mask[..., None]
        g_attn = [backward(a)[xt] * mask3 for a in attention_patch_mass(trace, tokens, spec.layers)]
        return patchfool_direction(g_ce * mask3, g_attn, spec.alpha), loss.item(), None
    return backward(loss)[xt], loss.item(), active


def attack_run(m: SegModel, x: np.ndarray, gt: np.ndarray, target: AttackTarget | np.ndarray,
               mask: PatchMask, spec: AttackSpec, rng: RngState, *, evaluate_result: bool = True
               ) -> AttackResult:
    """Masked iterative attack on one image (H, W, 3) in [0, 1]."""
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError("attack_run works on a single (H, W, 3) image")
    if x.min() < 0 or x.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    if mask.area == 0:
        raise ValueError("empty patch mask")
    target_labels = target.labels if isinstance(target, AttackTarget) else np.asarray(target)
    tokens = patch_tokens(mask, m.cfg.patch)
    if spec.method in ATTENTION_METHODS and len(tokens) == 0:
        raise ValueError("patch covers no token")
    gamma = spec.step_size
    cur = x.copy()
    losses, norms = [], []
    it = 0
    for it in range(spec.steps):
        tape = Tape()
        xt = tape.watch(cur)
        try:
            g, value, active = _objective(m, xt, spec, gt, target_labels, mask, tokens,
                                          rng.child("step", it))
        except NonFiniteError as exc:
            raise AttackError(f"non-finite value at iteration {it}: {exc}") from exc
        losses.append(value)
        if active == 0 and spec.method in DAG_FAMILY:
            break  # nothing left to flip
        step = masked_step(g, mask.mask, gamma)
        norms.append(float(np.abs(step).max()))
        cur = np.clip(cur + step, 0.0, 1.0)
    else:
        it = spec.steps
    result = AttackResult(cur, losses, None, it, norms)
    if evaluate_result:
        pred = model_forward(m, cur, "eval", rng.child("final")).data.argmax(axis=-1)
        result.prediction = pred
        result.report = evaluate(pred, gt, target_labels, mask, m.cfg.classes)
    result.seconds = time.perf_counter() - t0
    return result
