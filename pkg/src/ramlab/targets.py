"""Adversary target label maps: Permute and Strip.

Both constructions only use classes that do not occur in the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import RngState

TARGET_MODES = ("permute", "strip")


@dataclass(frozen=True)
class AttackTarget:
    labels: np.ndarray                    # (H, W) target classes
    mode: str
    mapping: dict = field(default_factory=dict)  # permute: gt class -> target class
    stripes: tuple = ()                   # strip: ((row_start, row_stop, class), ...)


def complement(gt: np.ndarray, classes: int) -> np.ndarray:
    present = np.unique(gt)
    comp = np.setdiff1d(np.arange(classes), present)
    if comp.size == 0:
        raise ValueError("every class occurs in the ground truth; no target class left")
    return comp


def permute_target(gt: np.ndarray, classes: int, rng: RngState) -> AttackTarget:
    """Map each present class to a class absent from ``gt``.

    Sampling is injective when the complement is large enough, otherwise
    independent with replacement.
    """
    present = np.unique(gt)
    comp = complement(gt, classes)
    gen = rng.generator()
    picks = gen.choice(comp, size=present.size, replace=comp.size < present.size)
    mapping = {int(s): int(t) for s, t in zip(present, picks)}
    lut = np.zeros(classes, dtype=np.int64)
    for s, t in mapping.items():
        lut[s] = t
    return AttackTarget(lut[gt], "permute", mapping=mapping)


def stripe_bounds(h: int, n: int) -> list[tuple[int, int]]:
    """Row ranges [floor(k h / n), floor((k + 1) h / n))."""
    if not 1 <= n <= h:
        raise ValueError(f"need 1 <= stripes <= height, got {n}")
    return [((k * h) // n, ((k + 1) * h) // n) for k in range(n)]


def strip_target(gt: np.ndarray, classes: int, stripes: int, rng: RngState) -> AttackTarget:
    """Horizontal bands, each filled with a class absent from ``gt``."""
    h, w = gt.shape
    comp = complement(gt, classes)
    gen = rng.generator()
    if comp.size >= stripes:
        picks = list(gen.choice(comp, size=stripes, replace=False))
    else:
        picks = []
        for _ in range(stripes):
            choices = comp if not picks or comp.size < 2 else comp[comp != picks[-1]]
            picks.append(gen.choice(choices))
    labels = np.empty((h, w), dtype=np.int64)
    table = []
    for (r0, r1), c in zip(stripe_bounds(h, stripes), picks):
        labels[r0:r1] = c
        table.append((r0, r1, int(c)))
    return AttackTarget(labels, "strip", stripes=tuple(table))


def make_target(mode: str, gt: np.ndarray, classes: int, rng: RngState, stripes: int = 4) -> AttackTarget:
    if mode == "permute":
        return permute_target(gt, classes, rng)
    if mode == "strip":
        return strip_target(gt, classes, stripes, rng)
    raise ValueError(f"unknown target mode {mode!r}")
