"""Confusion matrices and per-class precision / recall / F1 reports."""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .data import LABELS


@dataclass
class ConfusionMatrix:
    """``counts[true, predicted]``."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def zeros(cls, num_classes: int = 3) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(preds, labels, num_classes: int = 3) -> ConfusionMatrix:
    preds = np.asarray(list(preds), dtype=np.int64)
    labels = np.asarray(list(labels), dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions vs {labels.size} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        bad = arr[(arr < 0) | (arr >= num_classes)]
        if bad.size:
            raise ValueError(f"{name} index {int(bad[0])} outside [0, {num_classes})")
    cm = ConfusionMatrix.zeros(num_classes)
    np.add.at(cm.counts, (labels, preds), 1)
    return cm


@dataclass(frozen=True)
class PRF1:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False

    def __iter__(self):
        return iter((self.precision, self.recall, self.f1))


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)


def per_class_prf1(cm: ConfusionMatrix, c: int) -> PRF1:
    """Zero denominators give 0 for the affected metric and set ``degenerate``."""
    tp = int(cm.counts[c, c])
    predicted = int(cm.counts[:, c].sum())
    actual = int(cm.counts[c, :].sum())
    degenerate = predicted == 0 or actual == 0
    p = tp / predicted if predicted else 0.0
    r = tp / actual if actual else 0.0
    if p + r == 0:
        degenerate = True
    return PRF1(p, r, f1_score(p, r), degenerate)


def round_half_up(x: float, places: int = 2) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def summary(cm: ConfusionMatrix, weighted: bool = False, class_names=LABELS) -> dict:
    """Per-class metrics, averages (macro unless ``weighted``) and accuracy, unrounded."""
    if cm.total == 0:
        raise ValueError("cannot summarize an empty confusion matrix")
    names = list(class_names)[:cm.num_classes]
    rows = [per_class_prf1(cm, c) for c in range(cm.num_classes)]
    support = cm.counts.sum(axis=1)
    if weighted:
        wts = support / support.sum()
    else:
        wts = np.full(cm.num_classes, 1.0 / cm.num_classes)
    avg = {key: float(sum(w * getattr(r, key) for w, r in zip(wts, rows)))
           for key in ("precision", "recall", "f1")}
    return {
        "classes": names,
        "per_class": {
            n: {"precision": r.precision, "recall": r.recall, "f1": r.f1,
                "support": int(s), "degenerate": r.degenerate}
            for n, r, s in zip(names, rows, support)
        },
        "average": avg,
        "average_kind": "weighted" if weighted else "macro",
        "accuracy": float(np.trace(cm.counts) / cm.total),
        "total": cm.total,
        "confusion": cm.counts.tolist(),
    }


def format_report(report: dict) -> str:
    """Table with Precision / Recall / F1-score blocks (per class + Avg) and Acc."""
    names = report["classes"]
    cols = names + ["Avg"]
    blocks = (("Precision", "precision"), ("Recall", "recall"), ("F1-score", "f1"))
    header1 = " | ".join(f"{title:^{6 * len(cols) - 1}}" for title, _ in blocks) + " | Acc."
    header2 = " | ".join(" ".join(f"{c:>5}" for c in cols) for _ in blocks) + " |"
    cells = []
    for _, key in blocks:
        vals = [report["per_class"][n][key] for n in names] + [report["average"][key]]
        cells.append(" ".join(f"{round_half_up(v):5.2f}" for v in vals))
    line = " | ".join(cells) + f" | {round_half_up(report['accuracy']):4.2f}"
    flagged = [n for n in names if report["per_class"][n]["degenerate"]]
    out = [header1, header2, "-" * len(header2), line]
    if flagged:
        out.append("degenerate (zero denominator): " + ", ".join(flagged))
    return "\n".join(out)


def to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
