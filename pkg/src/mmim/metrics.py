"""Classification and segmentation metrics: F1, ROC-AUC, average precision, IoU."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricWarning(UserWarning):
    """A per-class score had no support and no predictions and was set to 0."""


def _check_pair(labels, other, what: str):
    labels, other = np.asarray(labels), np.asarray(other)
    if labels.shape[0] == 0:
        raise ValueError(f"{what}: empty input")
    if labels.shape != other.shape:
        raise ValueError(f"{what}: shape mismatch {labels.shape} vs {other.shape}")
    return labels, other


def accuracy(labels, preds) -> float:
    labels, preds = _check_pair(labels, preds, "accuracy")
    return float(np.mean(labels == preds))


def _f1_from_counts(tp, fp, fn, what: str) -> np.ndarray:
    denom = 2 * tp + fp + fn
    undefined = denom == 0
    if undefined.any():
        warnings.warn(f"{what}: classes {np.flatnonzero(undefined).tolist()} have no support "
                      "and no predictions; their F1 is set to 0", UndefinedMetricWarning)
    return np.where(undefined, 0.0, 2 * tp / np.maximum(denom, 1))


def per_class_f1(labels, preds, num_classes: int) -> np.ndarray:
    labels, preds = _check_pair(labels, preds, "f1")
    if labels.min() < 0 or preds.min() < 0 or max(labels.max(), preds.max()) >= num_classes:
        raise ValueError(f"class ids must lie in [0, {num_classes})")
    k = np.arange(num_classes)[:, None]
    is_l, is_p = labels[None, :] == k, preds[None, :] == k
    tp = (is_l & is_p).sum(axis=1)
    fp = (~is_l & is_p).sum(axis=1)
    fn = (is_l & ~is_p).sum(axis=1)
    return _f1_from_counts(tp, fp, fn, "macro F1")


def macro_f1(labels, preds, num_classes: int) -> float:
    """Unweighted mean of per-class F1 for single-label multiclass predictions."""
    return float(per_class_f1(labels, preds, num_classes).mean())


def multilabel_f1(labels, preds, average: str = "macro") -> float:
    """F1 over an ``(N, K)`` bit matrix; ``macro`` averages classes, ``micro`` pools counts."""
    labels, preds = _check_pair(labels, preds, "multilabel F1")
    labels, preds = labels.astype(bool), preds.astype(bool)
    tp = (labels & preds).sum(axis=0)
    fp = (~labels & preds).sum(axis=0)
    fn = (labels & ~preds).sum(axis=0)
    if average == "micro":
        return float(_f1_from_counts(np.array([tp.sum()]), np.array([fp.sum()]),
                                     np.array([fn.sum()]), "micro F1")[0])
    if average != "macro":
        raise ValueError(f"average must be 'macro' or 'micro', got {average!r}")
    return float(_f1_from_counts(tp, fp, fn, "macro F1").mean())


def _binary(labels, scores, what: str):
    labels, scores = _check_pair(labels, scores, what)
    labels = labels.astype(int)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError(f"{what}: labels must be binary")
    return labels, scores.astype(float)


def roc_auc(labels, scores) -> float:
    """P(score of a random positive > random negative), ties counted 1/2."""
    labels, scores = _binary(labels, scores, "ROC-AUC")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC is undefined when only one class is present")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(labels, scores):
    """False/true positive rates at every distinct threshold, from (0, 0) to (1, 1)."""
    labels, scores = _binary(labels, scores, "ROC curve")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), y.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    n_pos, n_neg = y.sum(), y.size - y.sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC curve is undefined when only one class is present")
    return np.r_[0.0, fps / n_neg], np.r_[0.0, tps / n_pos]


def roc_auc_trapezoid(labels, scores) -> float:
    fpr, tpr = roc_curve(labels, scores)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_auc_ovr(labels, scores) -> float:
    """Macro one-vs-rest ROC-AUC for ``(N, K)`` class scores."""
    labels = np.asarray(labels)
    scores = np.asarray(scores)
    aucs = [roc_auc((labels == k).astype(int), scores[:, k]) for k in range(scores.shape[1])
            if 0 < (labels == k).sum() < labels.size]
    if not aucs:
        raise ValueError("no class has both positives and negatives")
    return float(np.mean(aucs))


def average_precision(labels, scores) -> float:
    """Sum over distinct thresholds of (R_k - R_{k-1}) * P_k, no interpolation."""
    labels, scores = _binary(labels, scores, "average precision")
    n_pos = labels.sum()
    if n_pos == 0:
        raise ValueError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), y.size - 1]
    tps = np.cumsum(y)[last]
    precision = tps / (last + 1)
    recall = tps / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


pr_auc = average_precision


def mean_average_precision(labels, scores, average: str = "macro") -> float:
    """MAP (macro mean of per-class AP) or mAP (micro, AP over all flattened entries)."""
    labels, scores = _check_pair(labels, scores, "mean average precision")
    if average == "micro":
        return average_precision(labels.reshape(-1), scores.reshape(-1))
    if average != "macro":
        raise ValueError(f"average must be 'macro' or 'micro', got {average!r}")
    return float(np.mean([average_precision(labels[:, k], scores[:, k])
                          for k in range(labels.shape[1])]))


@dataclass
class IoUResult:
    miou: float
    per_class: Dict[int, float]
    absent: List[int]


def segmentation_iou(label_masks: Sequence, pred_masks: Sequence, classes: Sequence[int]) -> IoUResult:
    """Per-class |intersection| / |union| accumulated over all masks, then averaged.

    Classes absent from both labels and predictions are left out of the mean
    and listed in ``absent``.
    """
    if len(label_masks) != len(pred_masks):
        raise ValueError("label and prediction lists differ in length")
    classes = list(classes)
    inter = np.zeros(len(classes), dtype=np.int64)
    union = np.zeros(len(classes), dtype=np.int64)
    for lab, pred in zip(label_masks, pred_masks):
        lab, pred = np.asarray(lab), np.asarray(pred)
        if lab.shape != pred.shape:
            raise ValueError(f"mask shape mismatch {lab.shape} vs {pred.shape}")
        for i, c in enumerate(classes):
            a, b = lab == c, pred == c
            inter[i] += np.count_nonzero(a & b)
            union[i] += np.count_nonzero(a | b)
    per_class = {c: inter[i] / union[i] for i, c in enumerate(classes) if union[i] > 0}
    absent = [c for i, c in enumerate(classes) if union[i] == 0]
    if not per_class:
        raise ValueError("no class present in labels or predictions")
    return IoUResult(float(np.mean(list(per_class.values()))), per_class, absent)


def miou(label_masks, pred_masks, classes) -> float:
    return segmentation_iou(label_masks, pred_masks, classes).miou


@dataclass
class MetricRecord:
    name: str
    mean: float
    std: float
    n_seeds: int


def aggregate_seeds(runs: Sequence[Dict[str, float]]) -> List[MetricRecord]:
    """Mean and sample standard deviation (ddof=1) per metric over seed runs."""
    if not runs:
        raise ValueError("no runs to aggregate")
    names = list(runs[0])
    out = []
    for name in names:
        vals = np.array([r[name] for r in runs], dtype=float)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(MetricRecord(name, float(vals.mean()), std, len(vals)))
    return out
