"""Confusion-matrix metrics and ROC AUC.

Metrics that are undefined for a given test set (for example sensitivity
when it contains no positive bag) are reported as None and named in
`undefined`, never silently coerced to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    f1: float | None
    auc: float | None
    n_test: int
    undefined: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": self.accuracy, "sensitivity": self.sensitivity,
            "specificity": self.specificity, "f1": self.f1, "auc": self.auc,
            "n_test": self.n_test, "undefined": list(self.undefined),
        }


def confusion_counts(labels, predicted) -> tuple[int, int, int, int]:
    y = np.asarray(labels, dtype=int)
    p = np.asarray(predicted, dtype=int)
    if y.shape != p.shape:
        raise ContractError("labels and predictions must have equal length")
    tp = int(np.sum((y == 1) & (p == 1)))
    fp = int(np.sum((y == 0) & (p == 1)))
    tn = int(np.sum((y == 0) & (p == 0)))
    fn = int(np.sum((y == 1) & (p == 0)))
    return tp, fp, tn, fn


def roc_auc(labels, scores) -> float | None:
    """Area under the ROC curve; tied scores contribute half credit.

    Computed as the Mann-Whitney statistic via mean ranks, which equals the
    trapezoidal integral of the ROC curve swept across all distinct scores.
    Returns None when either class is absent.
    """
    y = np.asarray(labels, dtype=int)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # mean of 1-based ranks i+1..j+1
        i = j + 1
    rank_sum_pos = ranks[y == 1].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def report_from_scores(labels, scores, threshold: float = 0.5) -> EvalReport:
    labels = list(labels)
    scores = list(scores)
    if not labels:
        raise ContractError("cannot evaluate an empty test set")
    predicted = [int(s >= threshold) for s in scores]
    tp, fp, tn, fn = confusion_counts(labels, predicted)
    n = len(labels)
    undefined = []
    accuracy = (tp + tn) / n
    sensitivity = tp / (tp + fn) if (tp + fn) > 0 else None
    if sensitivity is None:
        undefined.append("sensitivity")
    specificity = tn / (tn + fp) if (tn + fp) > 0 else None
    if specificity is None:
        undefined.append("specificity")
    f1 = tp / (tp + 0.5 * (fp + fn)) if (tp + fp + fn) > 0 else None
    if f1 is None:
        undefined.append("f1")
    auc = roc_auc(labels, scores)
    if auc is None:
        undefined.append("auc")
    return EvalReport(tp=tp, fp=fp, tn=tn, fn=fn, accuracy=accuracy,
                      sensitivity=sensitivity, specificity=specificity, f1=f1,
                      auc=auc, n_test=n, undefined=undefined)


def evaluate(model, bags, threshold: float | None = None) -> EvalReport:
    """Score every bag with the model and evaluate at the given threshold."""
    from .model import predict

    bags = list(bags)
    if not bags:
        raise ContractError("cannot evaluate an empty test set")
    thr = model.threshold if threshold is None else threshold
    scores = [predict(bag, model).probability for bag in bags]
    labels = [bag.label for bag in bags]
    return report_from_scores(labels, scores, thr)
