"""Multiclass evaluation: macro AUC/F1/precision/recall, top-5, confusion, ROC.

AUC is one-vs-rest with trapezoidal integration; tied scores collapse into a
single threshold step (midpoint convention), which makes the result equal the
Mann-Whitney U statistic. F1/precision/recall are macro-averaged with classes
whose denominator is zero contributing 0. Macro AUC averages classes that have
both positives and negatives; degenerate classes carry no ranking information.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class MetricsReport:
    auc_macro: float
    f1_macro: float
    precision_macro: float
    recall_macro: float
    top5_accuracy: float
    accuracy: float
    mean_loss: float
    confusion: np.ndarray
    roc: dict[int, list[tuple[float, float]]]

    def to_dict(self) -> dict:
        return {
            "auc_macro": self.auc_macro,
            "f1_macro": self.f1_macro,
            "precision_macro": self.precision_macro,
            "recall_macro": self.recall_macro,
            "top5_accuracy": self.top5_accuracy,
            "accuracy": self.accuracy,
            "mean_loss": self.mean_loss,
            "confusion": self.confusion.astype(int).tolist(),
            "roc": {str(c): [[float(f), float(t)] for f, t in pts]
                    for c, pts in self.roc.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    def roc_csv(self) -> str:
        lines = ["class,fpr,tpr"]
        for c in sorted(self.roc):
            for f, t in self.roc[c]:
                lines.append(f"{c},{f!r},{t!r}")
        return "\n".join(lines) + "\n"

    def save_roc_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.roc_csv())


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.shape != y.shape:
        raise DataError(f"{p.size} predictions vs {y.size} labels")
    for name, arr in (("prediction", p), ("label", y)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DataError(f"{name} out of range [0, {num_classes})")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (y, p), 1)
    return m


def roc_points(scores, positives) -> list[tuple[float, float]]:
    """ROC curve from (0,0) to (1,1); equal scores form one threshold step."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    pos = np.asarray(positives, dtype=bool).reshape(-1)
    n_pos = int(pos.sum())
    n_neg = int(pos.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    pos_sorted = pos[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s_sorted[j] == s_sorted[i]:
            tp += bool(pos_sorted[j])
            fp += not pos_sorted[j]
            j += 1
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return points


def auc_trapezoid(points: list[tuple[float, float]]) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def evaluate(probs, labels) -> MetricsReport:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.ndim != 2 or p.shape[0] != y.size:
        raise DataError(f"probs {p.shape} do not match {y.size} labels")
    num_classes = p.shape[1]
    if y.size == 0:
        raise DataError("cannot evaluate an empty batch")
    if y.min() < 0 or y.max() >= num_classes:
        raise DataError(f"label out of range [0, {num_classes})")
    row_err = np.max(np.abs(p.sum(axis=1) - 1.0))
    if row_err > 1e-9:
        raise ValueError(f"probability rows must sum to 1 (max deviation {row_err:.3e})")

    preds = p.argmax(axis=1)
    confusion = confusion_matrix(preds, y, num_classes)

    diag = np.diag(confusion).astype(np.float64)
    col = confusion.sum(axis=0).astype(np.float64)
    row = confusion.sum(axis=1).astype(np.float64)
    precision = np.divide(diag, col, out=np.zeros(num_classes), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros(num_classes), where=row > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros(num_classes), where=pr > 0)

    roc: dict[int, list[tuple[float, float]]] = {}
    aucs = []
    for c in range(num_classes):
        pos = y == c
        if pos.all() or not pos.any():
            continue
        pts = roc_points(p[:, c], pos)
        roc[c] = pts
        aucs.append(auc_trapezoid(pts))
    auc_macro = float(np.mean(aucs)) if aucs else 0.5

    k = min(5, num_classes)
    topk = np.argsort(-p, axis=1, kind="stable")[:, :k]
    top5 = float((topk == y[:, None]).any(axis=1).mean())

    eps = np.finfo(np.float64).tiny
    mean_loss = float(-np.log(np.maximum(p[np.arange(y.size), y], eps)).mean())

    return MetricsReport(
        auc_macro=auc_macro,
        f1_macro=float(f1.mean()),
        precision_macro=float(precision.mean()),
        recall_macro=float(recall.mean()),
        top5_accuracy=top5,
        accuracy=float((preds == y).mean()),
        mean_loss=mean_loss,
        confusion=confusion,
        roc=roc,
    )
