"""Evaluation metrics for the classification and regression modes.

Regression metrics follow the usual sentiment-score conventions: binary
accuracy and F1 come in two forms, one treating zero as non-negative
over all samples, one dropping zero-labeled samples and splitting
negative/positive. Predictions map to the positive side at >= 0 in both
forms. Seven-way accuracy bins scores to the nearest integer clamped to
[-3, 3]. A constant prediction vector makes Pearson correlation
undefined; it is reported as NaN.
"""

from __future__ import annotations

from typing import Dict

import numpy as np


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(pred == labels))


def binary_f1(pred_pos: np.ndarray, true_pos: np.ndarray) -> float:
    """F1 of the positive class; 0 when the class is absent on either side."""
    tp = float(np.sum(pred_pos & true_pos))
    fp = float(np.sum(pred_pos & ~true_pos))
    fn = float(np.sum(~pred_pos & true_pos))
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def per_class_f1(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.array(
        [binary_f1(pred == k, labels == k) for k in range(num_classes)]
    )


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        return float("nan")
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


def bin_seven(scores: np.ndarray) -> np.ndarray:
    """Nearest-integer bin clamped to [-3, 3]."""
    return np.clip(np.rint(scores), -3, 3).astype(int)


def evaluate_classification(
    logits: np.ndarray, labels: np.ndarray
) -> Dict[str, float]:
    pred = np.argmax(logits, axis=1)
    k = logits.shape[1]
    f1s = per_class_f1(pred, labels, k)
    record = {"accuracy": accuracy(pred, labels), "macro_f1": float(f1s.mean())}
    for c in range(k):
        record[f"f1_class_{c}"] = float(f1s[c])
    return record


def evaluate_regression(preds: np.ndarray, scores: np.ndarray) -> Dict[str, float]:
    preds = np.asarray(preds, dtype=float).reshape(-1)
    scores = np.asarray(scores, dtype=float).reshape(-1)
    record: Dict[str, float] = {}

    # Form 1: zero counts as non-negative, every sample kept.
    pred_pos = preds >= 0
    true_pos = scores >= 0
    record["acc2_nonneg"] = float(np.mean(pred_pos == true_pos))
    record["f1_nonneg"] = binary_f1(pred_pos, true_pos)

    # Form 2: zero-labeled samples excluded, negative vs positive.
    keep = scores != 0
    if keep.any():
        record["acc2_nozero"] = float(np.mean((preds[keep] >= 0) == (scores[keep] > 0)))
        record["f1_nozero"] = binary_f1(preds[keep] >= 0, scores[keep] > 0)
    else:
        record["acc2_nozero"] = float("nan")
        record["f1_nozero"] = float("nan")

    record["acc7"] = float(np.mean(bin_seven(preds) == bin_seven(scores)))
    record["corr"] = pearson(preds, scores)
    record["mae"] = float(np.mean(np.abs(preds - scores)))
    return record
