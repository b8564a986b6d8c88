from __future__ import annotations

import numpy as np


def top1_accuracy(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(target)))


def mean_pixel_iou(pred: np.ndarray, target: np.ndarray, num_classes: int) -> float:
    """Per-class IoU pooled over the whole set, averaged over classes that occur."""
    pred, target = np.asarray(pred).ravel(), np.asarray(target).ravel()
    ious = []
    for c in range(num_classes):
        p, t = pred == c, target == c
        union = np.logical_or(p, t).sum()
        if union:
            ious.append(np.logical_and(p, t).sum() / union)
    return float(np.mean(ious)) if ious else 0.0


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of row-matched ``(cx, cy, w, h)`` boxes."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)

    def corners(x):
        return x[:, 0] - x[:, 2] / 2, x[:, 1] - x[:, 3] / 2, x[:, 0] + x[:, 2] / 2, x[:, 1] + x[:, 3] / 2

    ax1, ay1, ax2, ay2 = corners(a)
    bx1, by1, bx2, by2 = corners(b)
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def box_hit_rate(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    return float(np.mean(box_iou(pred, target) >= threshold))
