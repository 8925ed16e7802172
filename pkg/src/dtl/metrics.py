"""Segmentation and depth evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_label: int = 255) -> np.ndarray:
    """(K, K) counts, rows = ground truth, columns = prediction."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    valid = gt != ignore_label
    g, p = gt[valid].astype(np.int64), pred[valid].astype(np.int64)
    if np.any((g < 0) | (g >= num_classes)) or np.any((p < 0) | (p >= num_classes)):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return np.bincount(g * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)


@dataclass
class SegScores:
    per_class_iou: list  # float, or None for classes absent from both maps
    miou: float
    accuracy: float


def scores_from_confusion(cm: np.ndarray) -> SegScores:
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    ious = [float(tp[k] / union[k]) if union[k] > 0 else None for k in range(len(tp))]
    present = [v for v in ious if v is not None]
    total = cm.sum()
    return SegScores(
        per_class_iou=ious,
        miou=float(np.mean(present)) if present else 0.0,
        accuracy=float(tp.sum() / total) if total else 0.0,
    )


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_label: int = 255) -> SegScores:
    """IoU_k = TP/(TP+FP+FN); classes with empty union are left out of the mean."""
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    return scores_from_confusion(confusion_matrix(pred, gt, num_classes, ignore_label))


@dataclass
class DepthScores:
    abs_rel: float
    rmse_log: float
    silog: float
    delta1: float
    delta2: float
    delta3: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def depth_metrics(pred: np.ndarray, gt: np.ndarray) -> DepthScores:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if np.any(pred <= 0) or np.any(gt <= 0):
        raise ValueError("depths must be strictly positive")
    r = np.log(pred) - np.log(gt)
    ratio = np.maximum(pred / gt, gt / pred)
    return DepthScores(
        abs_rel=float(np.mean(np.abs(pred - gt) / gt)),
        rmse_log=float(np.sqrt(np.mean(r**2))),
        silog=float(np.mean(r**2) - np.mean(r) ** 2),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )
