"""Macro-averaged classification metrics for single- and multi-label outputs.

All macro scores average per-class one-vs-rest statistics. AUC is the
Mann-Whitney rank statistic with midranks for ties; a class whose labels are
all positive or all negative has an undefined AUC, reported as ``None``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

CSV_COLUMNS = ("scope", "mode", "n", "accuracy", "subset_accuracy", "macro_precision",
               "macro_sensitivity", "macro_specificity", "macro_f1", "macro_auc")
UNDEFINED = "NA"


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float | None:
    """P(score_pos > score_neg) + 0.5 P(tie), via midranks."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _div(a: float, b: float) -> float:
    return float(a) / float(b) if b else 0.0


@dataclass
class ClassStats:
    tp: int
    fp: int
    fn: int
    tn: int
    auc: float | None

    @property
    def support(self) -> int:
        return self.tp + self.fn

    @property
    def precision(self) -> float:
        return _div(self.tp, self.tp + self.fp)

    @property
    def sensitivity(self) -> float:
        return _div(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float:
        return _div(self.tn, self.tn + self.fp)

    @property
    def false_negative_rate(self) -> float:
        return _div(self.fn, self.tp + self.fn)

    @property
    def false_positive_rate(self) -> float:
        return _div(self.fp, self.tn + self.fp)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.sensitivity
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn, "support": self.support,
                "precision": self.precision, "sensitivity": self.sensitivity,
                "specificity": self.specificity, "f1": self.f1, "auc": self.auc}


@dataclass
class MetricsReport:
    mode: str
    n: int
    accuracy: float
    macro_precision: float
    macro_sensitivity: float
    macro_specificity: float
    macro_f1: float
    macro_auc: float | None
    per_class: dict[int, ClassStats]
    confusion: np.ndarray | None = None
    subset_accuracy: float | None = None
    scope: str = "all"
    classes: tuple[int, ...] = field(default_factory=tuple)

    def row(self) -> dict:
        return {"scope": self.scope, "mode": self.mode, "n": self.n, "accuracy": self.accuracy,
                "subset_accuracy": self.subset_accuracy, "macro_precision": self.macro_precision,
                "macro_sensitivity": self.macro_sensitivity, "macro_specificity": self.macro_specificity,
                "macro_f1": self.macro_f1, "macro_auc": self.macro_auc}

    def to_dict(self) -> dict:
        d = self.row()
        d["classes"] = list(self.classes)
        d["per_class"] = {str(k): v.to_dict() for k, v in self.per_class.items()}
        d["confusion"] = self.confusion.tolist() if self.confusion is not None else None
        return d

    def table(self) -> str:
        lines = [f"{self.scope} ({self.mode}-label, n={self.n})"]
        for key in CSV_COLUMNS[3:]:
            lines.append(f"  {key:<18} {_fmt(self.row()[key])}")
        lines.append("  class  support  prec    sens    spec    f1      auc")
        for c, s in self.per_class.items():
            lines.append(f"  {c:<6} {s.support:<8} {s.precision:.4f}  {s.sensitivity:.4f}  "
                         f"{s.specificity:.4f}  {s.f1:.4f}  {_fmt(s.auc)}")
        return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return UNDEFINED
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def compute_metrics(predictions, labels, mode: str = "single", threshold: float = 0.5,
                    classes: Sequence[int] | None = None, scope: str | None = None) -> MetricsReport:
    """Metrics from class scores.

    predictions: (n, C) probabilities. labels: class ids (single) or an
    (n, C) 0/1 matrix (multi). ``classes`` restricts the macro averages to a
    subset, e.g. the abnormal categories; single-label accuracy is then taken
    over samples whose true class is in the subset, and ``n`` counts them.
    """
    P = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    n, C = P.shape
    if n == 0:
        raise ValueError("compute_metrics: no predictions")
    subset = tuple(range(C)) if classes is None else tuple(int(c) for c in classes)
    if not subset or any(not 0 <= c < C for c in subset):
        raise ValueError(f"compute_metrics: class subset {subset} outside 0..{C - 1}")

    if mode == "single":
        y = np.asarray(labels, dtype=np.int64)
        if y.shape != (n,):
            raise ValueError(f"compute_metrics: {y.shape[0] if y.ndim else 0} labels for {n} predictions")
        if np.any((y < 0) | (y >= C)):
            raise ValueError("compute_metrics: label id outside the prediction columns")
        pred = P.argmax(axis=1)
        confusion = np.zeros((C, C), dtype=np.int64)
        np.add.at(confusion, (y, pred), 1)
        truth = np.eye(C, dtype=bool)[y]
        hard = np.eye(C, dtype=bool)[pred]
        in_subset = np.isin(y, subset)
        accuracy = float((pred[in_subset] == y[in_subset]).mean()) if in_subset.any() else 0.0
        subset_acc = None
        n_scored = int(in_subset.sum())
    elif mode == "multi":
        truth = np.asarray(labels, dtype=np.float64).astype(bool)
        if truth.shape != (n, C):
            raise ValueError(f"compute_metrics: label matrix {truth.shape} does not match {(n, C)}")
        hard = P >= threshold
        confusion = None
        cols = list(subset)
        accuracy = float((hard[:, cols] == truth[:, cols]).mean())
        subset_acc = float(np.all(hard[:, cols] == truth[:, cols], axis=1).mean())
        n_scored = n
    else:
        raise ValueError(f"unknown mode {mode!r}")

    per_class = {}
    for c in range(C):
        t, h = truth[:, c], hard[:, c]
        per_class[c] = ClassStats(int((t & h).sum()), int((~t & h).sum()), int((t & ~h).sum()),
                                  int((~t & ~h).sum()), binary_auc(P[:, c], t))
    stats = [per_class[c] for c in subset]
    aucs = [s.auc for s in stats if s.auc is not None]
    return MetricsReport(
        mode=mode, n=n_scored, accuracy=accuracy,
        macro_precision=float(np.mean([s.precision for s in stats])),
        macro_sensitivity=float(np.mean([s.sensitivity for s in stats])),
        macro_specificity=float(np.mean([s.specificity for s in stats])),
        macro_f1=float(np.mean([s.f1 for s in stats])),
        macro_auc=float(np.mean(aucs)) if aucs else None,
        per_class=per_class, confusion=confusion, subset_accuracy=subset_acc,
        scope=scope or ("all" if classes is None else "subset"), classes=subset,
    )


def metrics_csv(reports: Sequence[MetricsReport]) -> str:
    """One CSV row per report, columns in ``CSV_COLUMNS`` order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        row = r.row()
        w.writerow([_csv_value(row[k]) for k in CSV_COLUMNS])
    return buf.getvalue()


def _csv_value(v) -> str:
    if v is None:
        return UNDEFINED
    if isinstance(v, float):
        return repr(v)
    return str(v)
