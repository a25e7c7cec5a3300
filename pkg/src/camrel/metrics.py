"""Reliability and attribution metrics, confusion matrices and ROC curves.

The reliability threshold is strict everywhere: a patch counts as reliable
when ``g > threshold``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def reliability_accuracy(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(scores) == 0 or len(scores) != len(labels):
        raise ValueError(f"need matching non-empty inputs, got {len(scores)} scores and {len(labels)} labels")
    return float(np.mean((scores > threshold) == (labels == 1)))


def balanced_reliability_accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Mean of the per-class recalls; equals plain accuracy on a class-balanced set."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(scores) == 0 or len(scores) != len(labels):
        raise ValueError(f"need matching non-empty inputs, got {len(scores)} scores and {len(labels)} labels")
    pos = labels == 1
    if pos.all() or not pos.any():
        raise ValueError("balanced accuracy needs both reliable and unreliable patches")
    hit = (scores > threshold) == pos
    return float(0.5 * (hit[pos].mean() + hit[~pos].mean()))


@dataclass
class AttributionMetrics:
    accuracy: float          # over selected patches; nan when nothing is selected
    accuracy_all: float
    accuracy_delta: float
    selected_count: int
    total_count: int

    def table_row(self) -> dict:
        return {"patches": self.selected_count, "accuracy": self.accuracy, "acc_delta": self.accuracy_delta}


def attribution_metrics(predictions, truths, selection=None) -> AttributionMetrics:
    """Accuracy on the selected patches and its gain over using every patch."""
    pred = np.asarray(predictions)
    true = np.asarray(truths)
    if pred.shape != true.shape:
        raise ValueError(f"prediction/truth shape mismatch: {pred.shape} vs {true.shape}")
    sel = np.ones(len(pred), bool) if selection is None else np.asarray(selection, bool)
    if sel.shape != pred.shape:
        raise ValueError("selection mask must align with predictions")
    correct = pred == true
    acc_all = float(correct.mean()) if len(pred) else float("nan")
    n_sel = int(sel.sum())
    acc = float(correct[sel].mean()) if n_sel else float("nan")
    return AttributionMetrics(acc, acc_all, acc - acc_all, n_sel, len(pred))


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true model, columns = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)


def confusion(predictions, truths, num_models: int) -> ConfusionMatrix:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truths, dtype=np.int64)
    for name, arr in (("prediction", pred), ("truth", true)):
        if len(arr) and (arr.min() < 0 or arr.max() >= num_models):
            raise ValueError(f"{name} label out of range [0, {num_models})")
    counts = np.zeros((num_models, num_models), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts)


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc(scores, labels) -> RocCurve:
    """Threshold sweep over the distinct scores, highest first; equal scores flip together.

    The first point is (0, 0) at threshold +inf.  AUC uses the trapezoidal
    rule, which equals the tie-corrected Mann-Whitney statistic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(scores) != len(labels):
        raise ValueError("scores and labels must align")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], pos[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tpr = np.r_[0, tp[last]] / n_pos
    fpr = np.r_[0, fp[last]] / n_neg
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(thresholds, fpr, tpr, auc)


def pairwise_auc(scores, labels) -> float:
    """Brute-force AUC: fraction of (positive, negative) pairs ranked correctly, ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    ps, ns = scores[labels == 1], scores[labels != 1]
    total = 0.0
    for a in ps:
        for b in ns:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(ps) * len(ns))


# ---------------------------------------------------------------------------
# CSV output


def write_metrics_csv(metrics: dict, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, repr(float(v)) if isinstance(v, (float, np.floating)) else v])
    return path


def write_confusion_csv(cm: ConfusionMatrix, path, normalized: bool = False) -> Path:
    path = Path(path)
    data = cm.normalized() if normalized else cm.counts
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        n = data.shape[0]
        w.writerow(["true\\pred"] + [str(j) for j in range(n)])
        for i, row in enumerate(data):
            w.writerow([str(i)] + [repr(float(v)) if normalized else str(int(v)) for v in row])
    return path


def write_roc_csv(curve: RocCurve, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
        w.writerow(["auc", repr(curve.auc), ""])
    return path


def write_table_row_csv(rows: list[dict], path) -> Path:
    """Rows with ``md``, ``strategy``, ``patches``, ``accuracy`` and ``acc_delta`` columns."""
    path = Path(path)
    cols = ["md", "strategy", "patches", "accuracy", "acc_delta"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], float) else r[c] for c in cols])
    return path
