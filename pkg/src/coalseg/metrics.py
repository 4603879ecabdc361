"""Segmentation metrics: confusion matrix, pixel accuracy, mean IoU.

All metrics derive from one integer confusion matrix whose entry (i, j)
counts pixels of true class i predicted as class j; ignored pixels never
enter the counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import CLASS_NAMES, IGNORE_INDEX, NUM_CLASSES


class MetricsError(ValueError):
    pass


def confusion_matrix(
    pred: np.ndarray,
    target: np.ndarray,
    num_classes: int = NUM_CLASSES,
    ignore_index: int = IGNORE_INDEX,
) -> np.ndarray:
    """Exact pixel counts, rows = true class, columns = predicted class."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise MetricsError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    valid = target != ignore_index
    p, t = pred[valid].astype(np.int64), target[valid].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise MetricsError(f"prediction holds class index outside 0..{num_classes - 1}")
    if t.size and (t.min() < 0 or t.max() >= num_classes):
        raise MetricsError(f"target holds class index outside 0..{num_classes - 1}")
    counts = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def pixel_accuracy(confusion: np.ndarray) -> float:
    """Trace over total; an empty matrix is an error, not 0/0."""
    confusion = np.asarray(confusion)
    total = int(confusion.sum())
    if total == 0:
        raise MetricsError("empty confusion matrix: no counted pixels")
    return float(np.trace(confusion)) / total


def per_class_iou(confusion: np.ndarray) -> list:
    """diag / (row_sum + col_sum - diag) per class; None when the class
    is absent from both prediction and reference (empty union)."""
    confusion = np.asarray(confusion)
    diag = np.diag(confusion)
    union = confusion.sum(axis=1) + confusion.sum(axis=0) - diag
    return [float(d) / int(u) if u > 0 else None for d, u in zip(diag, union)]


def mean_iou(confusion: np.ndarray, strict_mean: bool = False):
    """Mean of per-class IoU.

    By default classes with an empty union are excluded from the mean (the
    common convention). With ``strict_mean=True`` the sum is divided by
    the full class count unconditionally, absent classes contributing 0 —
    matching the published averaging formula verbatim.

    Returns (miou, per_class) where per_class holds None for absent classes.
    """
    confusion = np.asarray(confusion)
    if confusion.sum() == 0:
        raise MetricsError("empty confusion matrix: no counted pixels")
    ious = per_class_iou(confusion)
    present = [v for v in ious if v is not None]
    if strict_mean:
        return sum(present) / len(ious), ious
    return sum(present) / len(present), ious


def per_class_recall(confusion: np.ndarray) -> list:
    confusion = np.asarray(confusion)
    diag = np.diag(confusion)
    rows = confusion.sum(axis=1)
    return [float(d) / int(r) if r > 0 else None for d, r in zip(diag, rows)]


def row_normalized(confusion: np.ndarray) -> np.ndarray:
    """Each row rescaled to sum to 1; empty rows stay zero."""
    confusion = np.asarray(confusion, dtype=np.float64)
    rows = confusion.sum(axis=1, keepdims=True)
    return np.divide(confusion, rows, out=np.zeros_like(confusion), where=rows > 0)


def format_confusion(confusion: np.ndarray, names=CLASS_NAMES) -> str:
    """Row-normalized text table: true classes down, predictions across."""
    norm = row_normalized(confusion)
    width = max(len(n) for n in names) + 2
    header = " " * width + "".join(f"{n:>{width}}" for n in names)
    lines = [header]
    for i, name in enumerate(names):
        lines.append(f"{name:<{width}}" + "".join(f"{v:>{width}.4f}" for v in norm[i]))
    return "\n".join(lines)


@dataclass
class Metrics:
    """One evaluation result; pa and miou are recomputable from confusion."""

    confusion: np.ndarray
    pa: float
    miou: float
    per_class_iou: list = field(default_factory=list)

    @classmethod
    def from_confusion(cls, confusion: np.ndarray, strict_mean: bool = False) -> "Metrics":
        miou, ious = mean_iou(confusion, strict_mean=strict_mean)
        return cls(confusion=np.asarray(confusion), pa=pixel_accuracy(confusion),
                   miou=miou, per_class_iou=ious)

    def as_record(self) -> dict:
        return {
            "pa": self.pa,
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "confusion": np.asarray(self.confusion).tolist(),
        }
