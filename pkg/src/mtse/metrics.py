"""Confusion-matrix based accuracy and agreement measures.

Rows index the reference (ground truth) class, columns the prediction, so a
row-normalized matrix carries per-class recall on its diagonal. Degenerate
ratios (empty rows, columns, or chance agreement of 1) evaluate to 0 and emit
a :class:`DegenerateMetricWarning` instead of producing NaN.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

IGNORE = -1


class DegenerateMetricWarning(RuntimeWarning):
    pass


def _flag(msg: str):
    warnings.warn(msg, DegenerateMetricWarning, stacklevel=3)


class ConfusionMatrix:
    def __init__(self, n: int, counts=None):
        if n < 1:
            raise ValueError("need at least one class")
        self.n = n
        if counts is None:
            self.counts = np.zeros((n, n), np.int64)
        else:
            counts = np.asarray(counts)
            if counts.shape != (n, n) or np.any(counts < 0):
                raise ValueError("counts must be a non-negative n x n matrix")
            self.counts = counts.astype(np.int64)

    @classmethod
    def from_counts(cls, counts) -> "ConfusionMatrix":
        counts = np.asarray(counts)
        return cls(counts.shape[0], counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, pred, truth) -> "ConfusionMatrix":
        """Count ``truth -> pred`` pairs in place, skipping IGNORE truth pixels."""
        pred = np.asarray(pred).reshape(-1)
        truth = np.asarray(truth).reshape(-1)
        if pred.shape != truth.shape:
            raise ValueError("prediction and truth maps differ in size")
        keep = truth != IGNORE
        pred, truth = pred[keep], truth[keep]
        if pred.size and (pred.min() < 0 or pred.max() >= self.n or truth.min() < 0 or truth.max() >= self.n):
            raise ValueError(f"label out of range 0..{self.n - 1}")
        self.counts += np.bincount(truth * self.n + pred, minlength=self.n * self.n).reshape(self.n, self.n)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n != self.n:
            raise ValueError("class counts differ")
        return ConfusionMatrix(self.n, self.counts + other.counts)

    def __add__(self, other):
        return self.merge(other)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix(n={self.n}, total={self.total})"


def _counts(cm) -> np.ndarray:
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if counts.sum() < 1:
        raise ValueError("confusion matrix is empty")
    return counts.astype(np.float64)


def overall_accuracy(cm) -> float:
    c = _counts(cm)
    return float(np.trace(c) / c.sum())


class PRF(NamedTuple):
    precision: float
    recall: float
    f: float
    degenerate: bool = False


def precision_recall_f(cm, i: int) -> PRF:
    c = _counts(cm)
    tp = c[i, i]
    predicted = c[:, i].sum()
    reference = c[i, :].sum()
    degenerate = False
    if predicted > 0:
        p = tp / predicted
    else:
        p, degenerate = 0.0, True
    if reference > 0:
        r = tp / reference
    else:
        r, degenerate = 0.0, True
    if p + r > 0:
        f = 2 * p * r / (p + r)
    else:
        f, degenerate = 0.0, True
    if degenerate:
        _flag(f"precision/recall undefined for class {i}")
    return PRF(float(p), float(r), float(f), degenerate)


def cohen_kappa(cm) -> float:
    """Chance-corrected agreement ``(p_o - p_e) / (1 - p_e)``."""
    c = _counts(cm)
    N = c.sum()
    p_o = np.trace(c) / N
    p_e = float((c.sum(axis=1) * c.sum(axis=0)).sum() / (N * N))
    if p_e >= 1.0:
        _flag("chance agreement is 1; kappa undefined")
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def conditional_kappa(cm, i: int, side: str = "reference") -> float:
    """Per-class kappa.

    ``side="reference"`` (default) conditions on the reference row:
    ``(N n_ii - n_i+ n_+i) / (N n_i+ - n_i+ n_+i)``. ``side="prediction"``
    conditions on the predicted column, replacing the denominator's ``n_i+``
    by ``n_+i``.
    """
    c = _counts(cm)
    N = c.sum()
    row, col = c[i, :].sum(), c[:, i].sum()
    if side == "reference":
        denom = N * row - row * col
    elif side == "prediction":
        denom = N * col - row * col
    else:
        raise ValueError(f"unknown side {side!r}")
    if denom == 0:
        _flag(f"conditional kappa undefined for class {i}")
        return 0.0
    return float((N * c[i, i] - row * col) / denom)


def row_normalize(cm) -> np.ndarray:
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    c = counts.astype(np.float64)
    rows = c.sum(axis=1, keepdims=True)
    out = np.divide(c, rows, out=np.zeros_like(c), where=rows > 0)
    if np.any(rows == 0):
        _flag(f"zero reference rows: {np.flatnonzero(rows[:, 0] == 0).tolist()}")
    return out


@dataclass
class ClassRow:
    index: int
    name: str
    precision: float
    recall: float
    f: float
    kappa: float
    support: int


@dataclass
class MetricsReport:
    """Per-class precision/recall/f/conditional kappa plus overall accuracy and kappa."""

    cm: ConfusionMatrix
    rows: list[ClassRow]
    overall_accuracy: float
    kappa: float
    normalized: np.ndarray

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, class_names=None, kappa_side: str = "reference"):
        names = list(class_names) if class_names else [f"class_{i}" for i in range(cm.n)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateMetricWarning)
            rows = []
            for i in range(cm.n):
                prf = precision_recall_f(cm, i)
                rows.append(ClassRow(i, names[i], prf.precision, prf.recall, prf.f,
                                     conditional_kappa(cm, i, kappa_side), int(cm.counts[i].sum())))
            normalized = row_normalize(cm)
        return cls(cm, rows, overall_accuracy(cm), cohen_kappa(cm), normalized)

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "kappa": self.kappa,
            "classes": [r.__dict__ for r in self.rows],
        }

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "name", "precision", "recall", "f", "conditional_kappa", "support"])
        for r in self.rows:
            w.writerow([r.index, r.name, f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f:.6f}",
                        f"{r.kappa:.6f}", r.support])
        # summary rows keep the value in the third column
        w.writerow(["summary", "overall_accuracy", f"{self.overall_accuracy:.6f}", "", "", "", self.cm.total])
        w.writerow(["summary", "kappa", f"{self.kappa:.6f}", "", "", "", self.cm.total])
        return buf.getvalue()

    def confusion_csv(self) -> str:
        """Row-normalized matrix; rows are reference classes, columns predictions."""
        buf = io.StringIO()
        buf.write("# rows=reference, columns=prediction, row-normalized (diagonal = recall)\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["reference"] + [str(j) for j in range(self.cm.n)])
        for i, row in enumerate(self.normalized):
            w.writerow([i] + [f"{v:.6f}" for v in row])
        return buf.getvalue()
