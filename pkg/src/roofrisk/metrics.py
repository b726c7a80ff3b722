"""Pixel-level segmentation metrics.

"Weighted" metrics average per-class scores with ground-truth pixel-frequency
weights. Reports carry two variants: one over all classes including
background, one over dwelling classes only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

NUM_CLASSES = 8


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = truth, columns = prediction

    @property
    def valid_total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @classmethod
    def empty(cls, num_classes: int = NUM_CLASSES) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))


def confusion(pred, truth, valid=None, num_classes: int = NUM_CLASSES) -> ConfusionMatrix:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}")
    if valid is None:
        valid = np.ones(pred.shape, dtype=bool)
    elif np.shape(valid) != pred.shape:
        raise ValueError(f"shape mismatch: valid {np.shape(valid)}, masks {pred.shape}")
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("no valid pixels")
    t = truth[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    counts = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def _class_subset(cm: ConfusionMatrix, include_background: bool):
    start = 0 if include_background else 1
    return np.arange(start, cm.counts.shape[0])


def weighted_accuracy(cm: ConfusionMatrix, include_background: bool = True) -> float:
    """Sum over present classes of (n_c / N) * recall_c."""
    classes = _class_subset(cm, include_background)
    n_c = cm.counts.sum(axis=1)[classes]
    present = n_c > 0
    total = n_c[present].sum()
    if total == 0:
        raise ValueError("no ground-truth pixels in the selected classes")
    recall = np.diag(cm.counts)[classes][present] / n_c[present]
    return float((n_c[present] / total * recall).sum())


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the union is empty."""
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def weighted_iou(cm: ConfusionMatrix, include_background: bool = True) -> float:
    """Sum over classes of (n_c / N) * IoU_c, skipping classes with empty union."""
    classes = _class_subset(cm, include_background)
    iou = per_class_iou(cm)[classes]
    n_c = cm.counts.sum(axis=1)[classes]
    keep = ~np.isnan(iou)
    total = n_c[keep].sum()
    if total == 0:
        raise ValueError("no ground-truth pixels in the selected classes")
    return float((n_c[keep] / total * iou[keep]).sum())


def binary_metrics(pred, truth, valid=None) -> tuple[float, float, float]:
    """Dwelling vs. background ``(accuracy, precision, recall)``.

    Precision (recall) is 1 when there are no predicted (true) positives and
    none exist, otherwise 0 when its denominator is empty.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}")
    valid = np.ones(pred.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("no valid pixels")
    p = pred[valid] > 0
    t = truth[valid] > 0
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    accuracy = (tp + tn) / p.size
    precision = tp / (tp + fp) if tp + fp else (1.0 if tp + fn == 0 else 0.0)
    recall = tp / (tp + fn) if tp + fn else (1.0 if tp + fp == 0 else 0.0)
    return accuracy, precision, recall


def report(cm: ConfusionMatrix, binary=None, class_names=None) -> dict:
    """Structured metrics report (JSON-serializable)."""
    names = class_names or [str(i) for i in range(cm.counts.shape[0])]
    n_c = cm.counts.sum(axis=1)
    iou = per_class_iou(cm)
    rows = []
    for c, name in enumerate(names):
        rows.append({
            "class": c,
            "name": name,
            "pixels": int(n_c[c]),
            "recall": float(cm.counts[c, c] / n_c[c]) if n_c[c] else None,
            "iou": None if np.isnan(iou[c]) else float(iou[c]),
        })
    out = {
        "valid_pixels": cm.valid_total,
        "weighted_accuracy": weighted_accuracy(cm),
        "weighted_iou": weighted_iou(cm),
        "weighting": "ground-truth pixel frequency, background included",
        "per_class": rows,
    }
    if n_c[1:].sum() > 0:
        out["weighted_accuracy_no_background"] = weighted_accuracy(cm, include_background=False)
        out["weighted_iou_no_background"] = weighted_iou(cm, include_background=False)
    if binary is not None:
        acc, prec, rec = binary
        out["binary"] = {"accuracy": acc, "precision": prec, "recall": rec}
    return out


def format_report(rep: dict) -> str:
    return json.dumps(rep, indent=2, sort_keys=False) + "\n"
