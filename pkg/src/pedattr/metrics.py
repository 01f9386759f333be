"""Mean accuracy (mA) and F1 over binarized per-attribute predictions.

mA averages, over binary columns, the mean of positive-class and
negative-class recall; F1 is the harmonic mean of precision and recall,
averaged over columns. Multi-class attributes expand one-vs-rest into one
column per class. A zero-denominator term contributes 0 and flags its
column so the policy stays auditable.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .config import AttributeSpec
from .errors import InputError, ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class ColumnMetrics:
    name: str
    counts: ConfusionCounts
    recall_pos: float
    recall_neg: float
    precision: float
    f1: float
    flags: list[str] = field(default_factory=list)


@dataclass
class MetricsReport:
    columns: list[ColumnMetrics]
    mean_accuracy: float
    mean_f1: float

    @property
    def column_count(self) -> int:
        return len(self.columns)

    @property
    def flagged_columns(self) -> list[str]:
        return [c.name for c in self.columns if c.flags]

    def to_dict(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "mean_f1": self.mean_f1,
            "column_count": self.column_count,
            "flagged_columns": self.flagged_columns,
            "columns": [
                {
                    "name": c.name,
                    "tp": c.counts.tp, "tn": c.counts.tn,
                    "fp": c.counts.fp, "fn": c.counts.fn,
                    "recall_pos": c.recall_pos, "recall_neg": c.recall_neg,
                    "precision": c.precision, "f1": c.f1,
                    "flags": c.flags,
                }
                for c in self.columns
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        """One row per column plus an aggregate row (balanced_acc of the
        aggregate row is mA, f1 is the column-mean F1)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["attribute", "recall_pos", "recall_neg",
                         "precision", "f1", "balanced_acc"])
        for c in self.columns:
            writer.writerow([c.name, repr(c.recall_pos), repr(c.recall_neg),
                             repr(c.precision), repr(c.f1),
                             repr(0.5 * (c.recall_pos + c.recall_neg))])
        mean = lambda xs: sum(xs) / len(xs)
        writer.writerow(["aggregate",
                         repr(mean([c.recall_pos for c in self.columns])),
                         repr(mean([c.recall_neg for c in self.columns])),
                         repr(mean([c.precision for c in self.columns])),
                         repr(self.mean_f1),
                         repr(self.mean_accuracy)])
        return buf.getvalue()


def binary_column_names(specs: list[AttributeSpec]) -> list[str]:
    names = []
    for spec in specs:
        if spec.num_classes == 2:
            names.append(spec.name)
        else:
            names.extend(f"{spec.name}={k}" for k in range(spec.num_classes))
    return names


def binarize(classes: np.ndarray, specs: list[AttributeSpec]) -> np.ndarray:
    """Expand a samples x attributes class matrix into binary columns.

    Binary attributes keep a single column where class 1 is the positive;
    attributes with K > 2 classes expand one-vs-rest into K columns.
    """
    classes = np.asarray(classes, dtype=np.int64)
    if classes.ndim != 2 or classes.shape[1] != len(specs):
        raise ShapeError(
            f"class matrix {classes.shape} does not match {len(specs)} attributes")
    cols = []
    for j, spec in enumerate(specs):
        col = classes[:, j]
        if np.any((col < 0) | (col >= spec.num_classes)):
            raise InputError(
                f"attribute '{spec.name}' has class indices outside "
                f"[0, {spec.num_classes})")
        if spec.num_classes == 2:
            cols.append(col == 1)
        else:
            cols.extend(col == k for k in range(spec.num_classes))
    return np.stack(cols, axis=1).astype(np.int64)


def confusion(pred: np.ndarray, label: np.ndarray) -> list[ConfusionCounts]:
    """Per-column confusion counts over 0/1 matrices of equal shape."""
    pred = np.asarray(pred, dtype=np.int64)
    label = np.asarray(label, dtype=np.int64)
    if pred.shape != label.shape or pred.ndim != 2:
        raise ShapeError(
            f"prediction matrix {pred.shape} does not match labels {label.shape}")
    counts = []
    for j in range(pred.shape[1]):
        p, l = pred[:, j], label[:, j]
        counts.append(ConfusionCounts(
            tp=int(np.sum((p == 1) & (l == 1))),
            tn=int(np.sum((p == 0) & (l == 0))),
            fp=int(np.sum((p == 1) & (l == 0))),
            fn=int(np.sum((p == 0) & (l == 1))),
        ))
    return counts


def _safe_ratio(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def mean_accuracy(counts: list[ConfusionCounts]) -> tuple[float, list[int]]:
    """mA = (1/2A) * sum_i (TP_i/(TP_i+FN_i) + TN_i/(TN_i+FP_i)).

    Returns (mA, indices of columns where a recall denominator was zero).
    """
    if not counts:
        raise InputError("mean_accuracy needs at least one column")
    total = 0.0
    flagged = []
    for i, c in enumerate(counts):
        r_pos, bad_pos = _safe_ratio(c.tp, c.tp + c.fn)
        r_neg, bad_neg = _safe_ratio(c.tn, c.tn + c.fp)
        if bad_pos or bad_neg:
            flagged.append(i)
        total += r_pos + r_neg
    return total / (2 * len(counts)), flagged


def f1_scores(counts: list[ConfusionCounts]) -> tuple[list[float], float, list[int]]:
    """Per-column F1 = 2PR/(P+R) and their mean.

    Columns where P + R is zero (or a denominator vanishes with TP = 0)
    score 0 and are flagged.
    """
    if not counts:
        raise InputError("f1_scores needs at least one column")
    scores = []
    flagged = []
    for i, c in enumerate(counts):
        precision, bad_p = _safe_ratio(c.tp, c.tp + c.fp)
        recall, bad_r = _safe_ratio(c.tp, c.tp + c.fn)
        if bad_p or bad_r or precision + recall == 0.0:
            scores.append(0.0)
            flagged.append(i)
        else:
            scores.append(2.0 * precision * recall / (precision + recall))
    return scores, sum(scores) / len(scores), flagged


def build_report(pred_classes: np.ndarray, label_classes: np.ndarray,
                 specs: list[AttributeSpec]) -> MetricsReport:
    """Binarize, count, and assemble the full metrics report."""
    pred_bin = binarize(pred_classes, specs)
    label_bin = binarize(label_classes, specs)
    counts = confusion(pred_bin, label_bin)
    names = binary_column_names(specs)
    ma, ma_flagged = mean_accuracy(counts)
    f1s, mean_f1, f1_flagged = f1_scores(counts)
    columns = []
    for i, (name, c) in enumerate(zip(names, counts)):
        r_pos, bad_pos = _safe_ratio(c.tp, c.tp + c.fn)
        r_neg, bad_neg = _safe_ratio(c.tn, c.tn + c.fp)
        precision, bad_prec = _safe_ratio(c.tp, c.tp + c.fp)
        flags = []
        if bad_pos:
            flags.append("recall_pos_undefined")
        if bad_neg:
            flags.append("recall_neg_undefined")
        if bad_prec:
            flags.append("precision_undefined")
        if i in f1_flagged:
            flags.append("f1_undefined")
        columns.append(ColumnMetrics(name=name, counts=c, recall_pos=r_pos,
                                     recall_neg=r_neg, precision=precision,
                                     f1=f1s[i], flags=flags))
    return MetricsReport(columns=columns, mean_accuracy=ma, mean_f1=mean_f1)
