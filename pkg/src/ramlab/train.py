"""Training loop (Adam on pixel cross-entropy) and PGD adversarial training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .attacks import loss_pgd, masked_step
from .data import make_patch_mask
from .metrics import PooledIoU
from .model import SegModel, model_forward
from .rng import RngState
from .targets import permute_target
from .tensor import NonFiniteError, Tape, backward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    adversarial: str = "off"       # "off" | "pgd"
    adv_steps: int = 10
    adv_gamma: float = 0.1
    adv_patch: int = 8
    adv_location: str = "lower_right"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.adversarial not in ("off", "pgd"):
            raise ValueError("adversarial must be 'off' or 'pgd'")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid batch size / epochs")


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    train_miou: list = field(default_factory=list)
    adv_steps_run: int = 0


def cross_entropy(y, labels: np.ndarray):
    """Mean over pixels of -log Y[label]."""
    return ops.scale(loss_pgd(y, labels), -1.0 / labels.size)


def _loss_and_grads(m: SegModel, xb: np.ndarray, yb: np.ndarray, rng: RngState):
    tape = Tape()
    params = {k: tape.watch(v) for k, v in m.params.items()}
    y = model_forward(m, xb, "train", rng, params=params)
    loss = cross_entropy(y, yb)
    g = backward(loss)
    return loss.item(), {k: g[t] for k, t in params.items()}, y.data


def adversarial_batch(m: SegModel, xb: np.ndarray, yb: np.ndarray, tc: TrainConfig,
                      rng: RngState) -> tuple[np.ndarray, int]:
    """Inner maximisation: ``adv_steps`` masked PGD steps toward Permute targets.

    Returns the adversarial batch and the number of inner steps run.
    """
    if tc.adv_steps == 0:
        return xb, 0
    h, w = xb.shape[1:3]
    mask = make_patch_mask(h, w, tc.adv_patch, tc.adv_location, rng.child("mask"))
    targets = np.stack([permute_target(lab, m.cfg.classes, rng.child("target", i)).labels
                        for i, lab in enumerate(yb)])
    cur = xb.copy()
    for s in range(tc.adv_steps):
        tape = Tape()
        xt = tape.watch(cur)
        y = model_forward(m, xt, "train", rng.child("inner", s))
        g = backward(loss_pgd(y, targets))[xt]
        cur = np.clip(cur + masked_step(g, mask.mask, tc.adv_gamma), 0.0, 1.0)
    return cur, tc.adv_steps


def adversarial_train_step(m: SegModel, opt: Adam, xb: np.ndarray, yb: np.ndarray,
                           tc: TrainConfig, rng: RngState) -> tuple[SegModel, float, int]:
    """One outer step on the adversarial version of a batch."""
    xa, n_inner = adversarial_batch(m, xb, yb, tc, rng.child("adv"))
    loss, grads, _ = _loss_and_grads(m, xa, yb, rng.child("outer"))
    if not np.isfinite(loss):
        raise TrainingDiverged("non-finite loss")
    return m.with_params(opt.step(m.params, grads)), loss, n_inner


def train(m: SegModel, dataset, tc: TrainConfig, *, on_epoch=None) -> tuple[SegModel, TrainHistory]:
    """Mini-batch Adam.  ``dataset`` is a sequence of (image, labels)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    xs = np.stack([img for img, _ in dataset])
    ys = np.stack([lab for _, lab in dataset])
    rng = RngState(tc.seed).child("train")
    opt = Adam(tc.lr, tc.beta1, tc.beta2, tc.eps)
    hist = TrainHistory()
    step = 0
    for epoch in range(tc.epochs):
        order = rng.child("shuffle", epoch).generator().permutation(len(xs))
        pooled = PooledIoU(m.cfg.classes)
        total = 0.0
        for start in range(0, len(order), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            srng = rng.child("step", step)
            try:
                if tc.adversarial == "pgd":
                    m, loss, n = adversarial_train_step(m, opt, xs[idx], ys[idx], tc, srng)
                    hist.adv_steps_run += n
                    probs = None
                else:
                    loss, grads, probs = _loss_and_grads(m, xs[idx], ys[idx], srng)
                    m = m.with_params(opt.step(m.params, grads))
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch} step {step}: loss is {loss}")
            if probs is not None:
                for p, lab in zip(probs, ys[idx]):
                    pooled.add(p, lab)
            total += loss * len(idx)
            step += 1
        hist.loss.append(total / len(xs))
        hist.train_miou.append(pooled.value() if pooled.cm.any() else float("nan"))
        log.info("epoch %d loss %.4f", epoch, hist.loss[-1])
        if on_epoch is not None:
            on_epoch(epoch, m, hist)
    return m, hist


def clean_miou(m: SegModel, dataset, rng: RngState | None = None) -> float:
    """Pooled mIoU of eval-mode predictions against ground truth.

    Images are run one at a time so attention dropout draws are keyed to the
    image index.
    """
    rng = rng or RngState(0).child("clean-eval")
    pooled = PooledIoU(m.cfg.classes)
    for i, (img, lab) in enumerate(dataset):
        pooled.add(model_forward(m, img, "eval", rng.child(i)).data, lab)
    return pooled.value()
