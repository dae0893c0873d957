"""Task metrics: mean IoU for dense tasks, accuracy for classification."""

from __future__ import annotations

import numpy as np


def miou(pred_classes, gt_classes, num_classes: int) -> float:
    """Mean IoU over the classes that occur in either prediction or ground truth."""
    pred = np.asarray(pred_classes).ravel()
    gt = np.asarray(gt_classes).ravel()
    if pred.size == 0 or pred.shape != gt.shape:
        raise ValueError("need non-empty, matching prediction and ground truth")
    ious = []
    for c in range(num_classes):
        p, g = pred == c, gt == c
        union = np.count_nonzero(p | g)
        if union:
            ious.append(np.count_nonzero(p & g) / union)
    return float(np.mean(ious))


def class_iou(pred_classes, gt_classes, cls: int) -> float:
    p = np.asarray(pred_classes) == cls
    g = np.asarray(gt_classes) == cls
    union = np.count_nonzero(p | g)
    return float(np.count_nonzero(p & g) / union) if union else float("nan")


def accuracy(pred, gt) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.size == 0:
        raise ValueError("empty input")
    return float(np.mean(pred == gt))


def predict_labels(logits: np.ndarray, kind: str) -> np.ndarray:
    if kind == "segmentation":
        return np.argmax(logits, axis=-3)
    if kind == "saliency":
        return (logits.reshape(logits.shape[:-3] + logits.shape[-2:]) > 0).astype(np.int64)
    if kind == "classification":
        return np.argmax(logits, axis=-1)
    raise ValueError(f"unknown task kind {kind!r}")


def task_metric(pred_labels: np.ndarray, gt: np.ndarray, kind: str, num_classes: int) -> float:
    if kind == "segmentation":
        return miou(pred_labels, gt, num_classes)
    if kind == "saliency":
        return miou(pred_labels, gt, 2)
    if kind == "classification":
        return accuracy(pred_labels, gt)
    raise ValueError(f"unknown task kind {kind!r}")
