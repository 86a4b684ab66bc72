"""Evaluation metrics: macro F1 (multilabel), top-1 accuracy (multiclass), AUROC (binary)."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class UndefinedMetric(ValueError):
    pass


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def f1_macro(scores, labels, threshold: float = 0.5, from_logits: bool = True) -> float:
    """Unweighted mean of per-class F1, with 0/0 taken as 0.

    Predictions are ``sigmoid(score) >= threshold`` (or ``score >= threshold``
    when ``from_logits`` is false).
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(labels).astype(bool)
    probs = _sigmoid(scores) if from_logits else scores
    pred = probs >= threshold
    tp = (pred & truth).sum(axis=0).astype(np.float64)
    fp = (pred & ~truth).sum(axis=0).astype(np.float64)
    fn = (~pred & truth).sum(axis=0).astype(np.float64)
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def top1_accuracy(scores, labels) -> float:
    """Fraction of rows whose argmax equals the label (ties go to the lowest index).

    ``labels`` may be class ids [N] or one-hot rows [N, C].
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    return float((scores.argmax(axis=1) == labels).mean())


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC from rank sums; tied pairs count one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs at least one positive and one negative sample")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def task_metric(scores, labels, task: str, threshold: float = 0.5) -> float:
    if task == "multilabel":
        return f1_macro(scores, labels, threshold)
    if task == "multiclass":
        return top1_accuracy(scores, labels)
    if task == "binary":
        return auroc(np.asarray(scores).reshape(-1), np.asarray(labels).reshape(-1))
    raise ValueError(f"unknown task {task!r}")


METRIC_NAMES = {"multilabel": "f1_macro", "multiclass": "accuracy", "binary": "auroc"}
