"""Confusion-matrix accumulation, benchmark scores and cross-dataset summary statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import IGNORE, LabelMap
from .errors import ValidationError

METRICS = ("acc_micro", "acc_macro", "f1_macro", "jaccard_macro")
METRIC_LABELS = {"acc_micro": "Acc_µ", "acc_macro": "Acc_M", "f1_macro": "F1_M", "jaccard_macro": "J_M"}
# classes with neither ground truth nor predictions are left out of macro means
ZERO_SUPPORT_POLICY = "exclude"


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, LabelMap) else np.asarray(x)


class ConfusionMatrix:
    """K x K pixel counts, ``counts[t, p]`` = pixels of true class t predicted as p."""

    def __init__(self, K: int, counts=None):
        if K < 1:
            raise ValidationError("confusion matrix needs K >= 1")
        self.K = int(K)
        if counts is None:
            self.counts = np.zeros((K, K), dtype=np.int64)
        else:
            counts = np.array(counts, dtype=np.int64)
            if counts.shape != (K, K) or np.any(counts < 0):
                raise ValidationError("counts must be a nonnegative K x K matrix")
            self.counts = counts

    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, truth, pred) -> "ConfusionMatrix":
        t = _labels(truth)
        p = _labels(pred)
        if t.shape != p.shape:
            raise ValidationError(f"shape error: truth {t.shape} vs prediction {p.shape}")
        t = t.ravel().astype(np.int64)
        p = p.ravel().astype(np.int64)
        if np.any((p < 0) | (p >= self.K)):
            raise ValidationError("invalid prediction: values outside [0, K) or IGNORE")
        keep = t != IGNORE
        t, p = t[keep], p[keep]
        if np.any((t < 0) | (t >= self.K)):
            raise ValidationError("invalid class index in ground truth")
        self.counts += np.bincount(t * self.K + p, minlength=self.K * self.K).reshape(self.K, self.K)
        return self

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.K, self.counts.copy())

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and self.K == other.K and np.array_equal(
            self.counts, other.counts)

    def __repr__(self) -> str:
        return f"ConfusionMatrix(K={self.K}, total={self.total()})"


def cm_update(cm: ConfusionMatrix, truth, pred) -> ConfusionMatrix:
    """Add one (truth, prediction) pair; IGNORE truth pixels are skipped."""
    return cm.update(truth, pred)


def cm_merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    if a.K != b.K:
        raise ValidationError(f"incompatible matrices: K={a.K} vs K={b.K}")
    return ConfusionMatrix(a.K, a.counts + b.counts)


@dataclass(frozen=True)
class ScoreSet:
    acc_micro: float
    acc_macro: float
    f1_macro: float
    jaccard_macro: float
    recall: tuple
    precision: tuple
    f1: tuple
    jaccard: tuple
    evaluated_class_mask: tuple  # classes entering the F1/Jaccard means
    recall_mask: tuple  # classes entering the macro accuracy mean (have ground truth)
    zero_support_policy: str = ZERO_SUPPORT_POLICY

    @property
    def per_class(self) -> dict:
        return {"recall": self.recall, "precision": self.precision, "f1": self.f1,
                "jaccard": self.jaccard}

    def summary(self) -> dict:
        return {m: getattr(self, m) for m in METRICS}

    def to_dict(self) -> dict:
        return {
            **self.summary(),
            "per_class": {k: list(v) for k, v in self.per_class.items()},
            "evaluated_class_mask": list(self.evaluated_class_mask),
            "recall_mask": list(self.recall_mask),
            "zero_support_policy": self.zero_support_policy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreSet":
        pc = d["per_class"]
        return cls(d["acc_micro"], d["acc_macro"], d["f1_macro"], d["jaccard_macro"],
                   tuple(pc["recall"]), tuple(pc["precision"]), tuple(pc["f1"]),
                   tuple(pc["jaccard"]), tuple(d["evaluated_class_mask"]),
                   tuple(d["recall_mask"]), d.get("zero_support_policy", ZERO_SUPPORT_POLICY))


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def scores(cm: ConfusionMatrix) -> ScoreSet:
    total = cm.total()
    if total == 0:
        raise ValidationError("no evaluated pixels")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    fp = cols - tp
    fn = rows - tp

    recall = _safe_div(tp, rows)
    precision = _safe_div(tp, cols)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    jaccard = _safe_div(tp, tp + fp + fn)

    has_truth = rows > 0
    present = has_truth | (cols > 0)
    return ScoreSet(
        acc_micro=float(tp.sum() / total),
        acc_macro=float(recall[has_truth].mean()),
        f1_macro=float(f1[present].mean()),
        jaccard_macro=float(jaccard[present].mean()),
        recall=tuple(recall.tolist()),
        precision=tuple(precision.tolist()),
        f1=tuple(f1.tolist()),
        jaccard=tuple(jaccard.tolist()),
        evaluated_class_mask=tuple(present.tolist()),
        recall_mask=tuple(has_truth.tolist()),
    )


def summary_avg(per_dataset: Mapping[str, float]) -> float:
    """Mean of one metric over datasets, each weighted equally."""
    if not per_dataset:
        raise ValidationError("summary over an empty set of datasets")
    return float(sum(per_dataset.values()) / len(per_dataset))


def summary_worst_case(per_dataset: Mapping[str, float]) -> float:
    """Minimum of one metric over datasets."""
    if not per_dataset:
        raise ValidationError("summary over an empty set of datasets")
    return float(min(per_dataset.values()))


def percent(x: float) -> str:
    """Render a [0, 1] score as a percentage with two decimals."""
    return f"{100.0 * x:.2f}"
