"""Segmentation metrics: mIoU (per map or pooled) and masked pixel accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CSV_HEADER = "image_id,mode,method,miou_gt,miou_target,pacc_masked"


def as_labels(y: np.ndarray) -> np.ndarray:
    """Class map from either labels (H, W) or per-pixel scores (H, W, C)."""
    y = np.asarray(y)
    return y.argmax(axis=-1) if y.ndim == 3 else y.astype(np.int64)


def confusion(pred: np.ndarray, ref: np.ndarray, classes: int) -> np.ndarray:
    pred, ref = as_labels(pred), as_labels(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    idx = ref.ravel() * classes + pred.ravel()
    return np.bincount(idx, minlength=classes * classes).reshape(classes, classes)


def iou_from_confusion(cm: np.ndarray) -> tuple[float, dict[int, float]]:
    """Mean IoU over classes that occur in either map; absent classes are skipped."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    present = np.nonzero(union > 0)[0]
    if present.size == 0:
        raise ValueError("no class present in either map")
    per_class = {int(c): float(inter[c] / union[c]) for c in present}
    return float(np.mean(list(per_class.values()))), per_class


def miou(pred: np.ndarray, ref: np.ndarray, classes: int) -> float:
    return iou_from_confusion(confusion(pred, ref, classes))[0]


def pacc_masked(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Pixel accuracy w.r.t. ``gt`` over pixels outside the patch mask."""
    mask = np.asarray(getattr(mask, "mask", mask), dtype=bool)
    pred = as_labels(pred)
    outside = ~mask
    denom = int(outside.sum())
    if denom == 0:
        raise ValueError("patch mask covers the whole image")
    return float(((pred == gt) & outside).sum() / denom)


@dataclass
class MetricsReport:
    miou_gt: float
    miou_target: float
    pacc_masked: float
    per_class_gt: dict = field(default_factory=dict)

    def csv_row(self, image_id, mode: str, method: str) -> str:
        return (f"{image_id},{mode},{method},{self.miou_gt:.6f},"
                f"{self.miou_target:.6f},{self.pacc_masked:.6f}")


def evaluate(pred: np.ndarray, gt: np.ndarray, target: np.ndarray, mask, classes: int) -> MetricsReport:
    m_gt, per = iou_from_confusion(confusion(pred, gt, classes))
    return MetricsReport(m_gt, miou(pred, target, classes), pacc_masked(pred, gt, mask), per)


class PooledIoU:
    """Accumulates a confusion matrix over many images."""

    def __init__(self, classes: int):
        self.classes = classes
        self.cm = np.zeros((classes, classes), dtype=np.int64)

    def add(self, pred, ref) -> None:
        self.cm += confusion(pred, ref, self.classes)

    def value(self) -> float:
        return iou_from_confusion(self.cm)[0]
