"""Confusion-matrix based accuracy and mean IoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


def confusion_matrix(pred: np.ndarray, true: np.ndarray, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise ContractError("prediction and label arrays differ in length")
    if pred.size and (pred.min() < 0 or pred.max() >= n_classes or true.min() < 0 or true.max() >= n_classes):
        raise ContractError("label out of range")
    return np.bincount(true * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def iou_from_confusion(cm: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where a class is absent from both truth and prediction) and their mean."""
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    iou = np.full(cm.shape[0], np.nan)
    iou[present] = tp[present] / denom[present]
    miou = float(iou[present].mean()) if present.any() else float("nan")
    return iou, miou


def compute_miou(pred: np.ndarray, true: np.ndarray, n_classes: int) -> tuple[np.ndarray, float]:
    if np.size(pred) == 0:
        raise ContractError("mIoU of an empty prediction set")
    return iou_from_confusion(confusion_matrix(pred, true, n_classes))


@dataclass
class SegmentMetrics:
    name: str
    accuracy: float
    miou: float
    per_class_iou: list[float]
    n_points: int

    @classmethod
    def from_confusion(cls, name: str, cm: np.ndarray) -> "SegmentMetrics":
        n = int(cm.sum())
        iou, miou = iou_from_confusion(cm)
        acc = float(np.trace(cm) / n) if n else float("nan")
        return cls(name, acc, miou, [float(v) for v in iou], n)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "accuracy": self.accuracy,
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "n_points": self.n_points,
        }
