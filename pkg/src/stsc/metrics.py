"""Accuracy, sensitivity, specificity, F1, AUC and relation distance."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .relation import RelationMatrix, check_aligned


class UndefinedMetricError(ValueError):
    """The metric has no value for this input (e.g. AUC with one class)."""


class MetricWarning(RuntimeWarning):
    pass


METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "auc", "f1")


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    sensitivity: float
    specificity: float
    auc: float
    f1: float
    n_samples: int
    per_class: dict = field(default_factory=dict, compare=False)

    def as_row(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def csv_header(self) -> str:
        return ",".join(METRIC_NAMES + ("n_samples",))

    def csv_row(self) -> str:
        return ",".join([repr(getattr(self, m)) for m in METRIC_NAMES] + [str(self.n_samples)])

    def pretty(self) -> str:
        lines = [f"samples     {self.n_samples}"]
        lines += [f"{name:<11} {getattr(self, name) * 100:6.2f}%" for name in METRIC_NAMES]
        return "\n".join(lines)


def _indicator(values, c: int) -> np.ndarray:
    """One-vs-rest 0/1 matrix (N×c) from class indices or bit vectors."""
    v = np.asarray(values)
    if v.ndim == 2:
        return v.astype(bool)
    return np.arange(c)[None, :] == v[:, None]


def per_class_counts(predictions, labels, c: int) -> dict[str, np.ndarray]:
    """One-vs-rest TP/FP/FN/TN per class."""
    pred, true = _indicator(predictions, c), _indicator(labels, c)
    return {
        "tp": (pred & true).sum(axis=0),
        "fp": (pred & ~true).sum(axis=0),
        "fn": (~pred & true).sum(axis=0),
        "tn": (~pred & ~true).sum(axis=0),
    }


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def confusion_metrics(predictions, labels, c: int) -> tuple[float, float, float, float]:
    """(accuracy, macro sensitivity, macro specificity, macro F1).

    ``predictions`` and ``labels`` are class indices, or 0/1 matrices for
    multi-label data, where accuracy is the fraction of correct bits. Classes
    that never occur in ``labels`` are left out of the macro averages.
    """
    pred, true = np.asarray(predictions), np.asarray(labels)
    if pred.shape != true.shape:
        raise ValueError(f"predictions {pred.shape} and labels {true.shape} differ in shape")
    if true.size == 0:
        raise UndefinedMetricError("no samples")
    acc = float((pred == true).mean())
    k = per_class_counts(pred, true, c)
    present = (k["tp"] + k["fn"]) > 0
    if not present.all():
        warnings.warn(
            f"classes {np.flatnonzero(~present).tolist()} absent from labels; excluded from macro averages",
            MetricWarning,
            stacklevel=2,
        )
    sen = _ratio(k["tp"], k["tp"] + k["fn"])
    spec = _ratio(k["tn"], k["tn"] + k["fp"])
    f1 = _ratio(2 * k["tp"], 2 * k["tp"] + k["fp"] + k["fn"])
    return acc, float(sen[present].mean()), float(spec[present].mean()), float(f1[present].mean())


def auc(scores, binary_labels) -> float:
    """Normalized Mann-Whitney U: P(pos > neg) + 0.5 * P(tie)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(binary_labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    ranks = rankdata(s)  # average ranks; tied pairs count one half
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(probs, labels, c: int) -> float:
    """Binary AUC on the positive-class column, else unweighted one-vs-rest mean.

    Degenerate classes (all positive or all negative) are skipped with a warning.
    """
    p = np.asarray(probs, dtype=np.float64)
    true = _indicator(labels, c)
    if c == 2 and np.asarray(labels).ndim == 1:
        return auc(p[:, 1], true[:, 1])
    vals, skipped = [], []
    for k in range(c):
        try:
            vals.append(auc(p[:, k], true[:, k]))
        except UndefinedMetricError:
            skipped.append(k)
    if skipped:
        warnings.warn(f"AUC undefined for classes {skipped}; skipped", MetricWarning, stacklevel=2)
    if not vals:
        raise UndefinedMetricError("AUC undefined for every class")
    return float(np.mean(vals))


def evaluate(probs, labels, c: int) -> MetricsReport:
    """Full report from class probabilities (argmax for single-label, 0.5 threshold for multi-label)."""
    p = np.asarray(probs, dtype=np.float64)
    true = np.asarray(labels)
    pred = (p >= 0.5).astype(np.int64) if true.ndim == 2 else p.argmax(axis=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MetricWarning)
        acc, sen, spec, f1 = confusion_metrics(pred, true, c)
        try:
            area = macro_auc(p, true, c)
        except UndefinedMetricError:
            area = float("nan")
    k = per_class_counts(pred, true, c)
    per_class = {
        "sensitivity": _ratio(k["tp"], k["tp"] + k["fn"]),
        "specificity": _ratio(k["tn"], k["tn"] + k["fp"]),
        "f1": _ratio(2 * k["tp"], 2 * k["tp"] + k["fp"] + k["fn"]),
    }
    return MetricsReport(acc, sen, spec, area, f1, int(true.shape[0]), per_class)


def relation_distance(r_student: RelationMatrix, r_teacher: RelationMatrix) -> tuple[float, np.ndarray]:
    """Mean absolute entrywise difference, and the |R_s - R_t| matrix itself."""
    check_aligned(r_student.batch_ids, r_teacher.batch_ids)
    diff = np.abs(r_student.values.data - r_teacher.values.data)
    return float(diff.mean()), diff
