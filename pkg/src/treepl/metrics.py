"""Classification metrics and map comparison.

Confusion matrices are indexed ``[true, predicted]``. Incoming-error
statistics (AGE, NC) are computed on the row-normalized matrix, so they
read as fractions of each true class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .geodata import UNLABELED

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "treepl.evaluation/1"


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or (c < 0).any():
            raise ValidationError("confusion counts must be a square non-negative matrix")
        object.__setattr__(self, "counts", c)
        labels = tuple(self.labels) or tuple(str(i) for i in range(len(c)))
        if len(labels) != len(c):
            raise ValidationError("label count does not match matrix size")
        object.__setattr__(self, "labels", labels)

    def row_normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, self.counts / np.where(rows > 0, rows, 1), 0.0)


def confusion(y_true, y_pred, n_classes: int, labels: Sequence[str] = ()) -> ConfusionMatrix:
    t = np.asarray(y_true, dtype=np.int64).ravel()
    p = np.asarray(y_pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValidationError("true and predicted label sequences differ in length")
    for name, a in (("true", t), ("predicted", p)):
        if len(a) and (a.min() < 0 or a.max() >= n_classes):
            raise ValidationError(f"{name} label outside [0, {n_classes})")
    counts = np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    return ConfusionMatrix(counts, tuple(labels))


@dataclass(frozen=True)
class EvaluationReport:
    labels: tuple[str, ...]
    support: tuple[int, ...]
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    macro_f1: float
    accuracy: float
    balanced_accuracy: float
    age: tuple[float, ...]
    nc: tuple[int, ...]
    excluded: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "labels": list(self.labels),
            "support": list(self.support),
            "precision": list(self.precision),
            "recall": list(self.recall),
            "f1": list(self.f1),
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "age": list(self.age),
            "nc": list(self.nc),
            "excluded_zero_support": list(self.excluded),
        }


def report(cm: ConfusionMatrix, attractor_threshold: float = 0.01) -> EvaluationReport:
    """Per-class and aggregate scores of a confusion matrix.

    Classes without support have no recall; they are left out of macro F1
    and balanced accuracy (and listed in ``excluded``). Precision of a class
    that is never predicted is taken as 0.
    """
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total == 0:
        raise ValidationError("confusion matrix is empty")
    diag = np.diag(c)
    rows, cols = c.sum(axis=1), c.sum(axis=0)
    has_support = rows > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(cols > 0, diag / np.where(cols > 0, cols, 1), 0.0)
        recall = np.where(has_support, diag / np.where(has_support, rows, 1), np.nan)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    f1 = np.where(has_support, f1, np.nan)
    excluded = tuple(cm.labels[i] for i in np.nonzero(~has_support)[0])
    if excluded:
        logger.info("classes without support excluded from macro averages: %s", ", ".join(excluded))

    rn = cm.row_normalized()
    incoming = rn[has_support]  # rows of supported true classes
    off = incoming.copy()
    sup_idx = np.nonzero(has_support)[0]
    off[np.arange(len(sup_idx)), sup_idx] = 0.0
    age = off.sum(axis=0)
    nc = (off > attractor_threshold).sum(axis=0)

    return EvaluationReport(
        labels=cm.labels,
        support=tuple(int(r) for r in rows),
        precision=tuple(float(v) for v in precision),
        recall=tuple(float(v) for v in recall),
        f1=tuple(float(v) for v in f1),
        macro_f1=float(f1[has_support].mean()),
        accuracy=float(diag.sum() / total),
        balanced_accuracy=float(recall[has_support].mean()),
        age=tuple(float(v) for v in age),
        nc=tuple(int(v) for v in nc),
        excluded=excluded,
    )


def evaluate(y_true, y_pred, labels: Sequence[str], attractor_threshold: float = 0.01) -> EvaluationReport:
    return report(confusion(y_true, y_pred, len(labels), labels), attractor_threshold)


def jaccard_maps(map_a: np.ndarray, map_b: np.ndarray, unlabeled: int = UNLABELED) -> float:
    """Share of same-class pixels among pixels labeled in either map."""
    a, b = np.asarray(map_a), np.asarray(map_b)
    if a.shape != b.shape:
        raise ValidationError(f"map shapes differ: {a.shape} vs {b.shape}")
    la, lb = a != unlabeled, b != unlabeled
    union = (la | lb).sum()
    if union == 0:
        return float("nan")
    return float(((a == b) & la & lb).sum() / union)


def class_area_fractions(label_map: np.ndarray, n_classes: int, unlabeled: int = UNLABELED) -> np.ndarray:
    """Percentage of labeled pixels taken by each class."""
    m = np.asarray(label_map).ravel()
    m = m[m != unlabeled]
    if len(m) == 0:
        raise ValidationError("map has no labeled pixels")
    return np.bincount(m, minlength=n_classes)[:n_classes] * (100.0 / len(m))
