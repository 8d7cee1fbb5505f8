"""Effective receptive fields: input-gradient maps of the centre output unit."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .data import write_pgm
from .model import SegModel, model_forward
from .rng import RngState
from .tensor import NonFiniteError, Tape, backward


@dataclass(frozen=True)
class RfMap:
    values: np.ndarray  # (H, W), nonnegative, sums to 1
    count: int = 1

    @property
    def shape(self) -> tuple:
        return self.values.shape


def centre(h: int, w: int) -> tuple[int, int]:
    return h // 2, w // 2


def rf_gradient_map(m: SegModel, x: np.ndarray, *, stochastic: bool = False,
                    rng: RngState | None = None) -> RfMap:
    """|d sum_c Y[H/2, W/2, c] / dX| summed over colour channels, normalised.

    Y here is the pre-softmax score: the class probabilities at a pixel sum to
    one, so their channel sum has no gradient at all.  Attention dropout is
    off unless ``stochastic`` is set (which then needs ``rng``).
    """
    x = np.asarray(x, dtype=np.float64)
    tape = Tape()
    xt = tape.watch(x)
    y = model_forward(m, xt, "eval", rng, logits=True, rad=stochastic)
    cy, cx = centre(*x.shape[:2])
    sel = np.zeros(y.shape)
    sel[cy, cx, :] = 1.0
    g = backward(ops.sum(ops.mul(y, sel)))[xt]
    mag = np.abs(g).sum(axis=-1)
    if not np.all(np.isfinite(mag)):
        raise NonFiniteError("non-finite receptive-field gradient")
    total = mag.sum()
    if total <= 0:
        raise NonFiniteError("receptive-field gradient is identically zero")
    return RfMap(mag / total)


def rf_average(m: SegModel, images, *, stochastic: bool = False,
               rng: RngState | None = None) -> RfMap:
    images = list(images)
    if not images:
        raise ValueError("rf_average needs at least one image")
    maps = [rf_gradient_map(m, img, stochastic=stochastic,
                            rng=rng.child(i) if rng is not None else None).values
            for i, img in enumerate(images)]
    acc = np.mean(maps, axis=0)
    return RfMap(acc / acc.sum(), len(maps))


def chebyshev_distance(h: int, w: int) -> np.ndarray:
    cy, cx = centre(h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    return np.maximum(np.abs(yy - cy), np.abs(xx - cx))


def rf_effective_radius(rf: RfMap | np.ndarray, q: float = 0.95) -> float:
    """Radius around the centre pixel enclosing a fraction ``q`` of the mass.

    Distances are Chebyshev.  The mass of ring r is spread evenly over
    (r - 1, r], so the result interpolates between integer radii; a map
    whose centre pixel alone holds ``q`` gives 0.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    g = rf.values if isinstance(rf, RfMap) else np.asarray(rf, dtype=np.float64)
    g = g / g.sum()
    dist = chebyshev_distance(*g.shape)
    mass = np.bincount(dist.ravel(), weights=g.ravel())
    enclosed = np.cumsum(mass)
    # tolerance for the rounding in the cumulative sum (q = 1 on a uniform map)
    r = int(np.argmax(enclosed >= q - 1e-12))
    if r == 0:
        return 0.0
    frac = (q - enclosed[r - 1]) / mass[r]
    return float(r - 1 + min(max(frac, 0.0), 1.0))


def heatmap_levels(rf: RfMap, floor: float = 1e-12) -> np.ndarray:
    """Log-scale the map, then stretch it affinely onto 0..255."""
    g = rf.values
    lg = np.log(np.maximum(g, floor * g.max()))
    lo, hi = lg.min(), lg.max()
    if hi == lo:
        return np.full(g.shape, 255, dtype=np.int64)
    return np.rint(255.0 * (lg - lo) / (hi - lo)).astype(np.int64)


def write_heatmap(path, rf: RfMap) -> None:
    write_pgm(path, heatmap_levels(rf))


RADIUS_HEADER = ("model_tag", "q", "radius")


def write_radius_csv(path, rows) -> None:
    """rows: iterable of (model_tag, q, radius)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(RADIUS_HEADER)
        for tag, q, r in rows:
            out.writerow([tag, f"{q:g}", f"{r:.4f}"])


def read_radius_csv(path) -> list[tuple[str, float, float]]:
    with open(Path(path), encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != RADIUS_HEADER:
        raise ValueError(f"{path}: not a radius CSV")
    return [(t, float(q), float(r)) for t, q, r in rows[1:]]
