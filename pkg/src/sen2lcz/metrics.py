"""Confusion matrix and the LCZ accuracy metrics (OA, AA, Kappa, WA, OA_b, OA_nb).

Rows of a confusion matrix are true LCZ labels 1..17, columns predictions.
Built-up types are LCZ 1-10, natural types LCZ A-G (labels 11-17).
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Union

import numpy as np

NUM_CLASSES = 17
BUILT = slice(0, 10)
NATURAL = slice(10, 17)
METRIC_COLUMNS = ("kappa", "aa", "wa", "oa", "oa_b", "oa_nb")


class MetricError(ValueError):
    """A metric is undefined for the given confusion matrix."""


def confusion(true, pred, num_classes: int = NUM_CLASSES) -> np.ndarray:
    true = np.asarray(true, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if true.shape != pred.shape:
        raise ValueError(f"true and predicted label counts differ: {true.size} vs {pred.size}")
    for name, arr in (("true", true), ("predicted", pred)):
        if arr.size and (arr.min() < 1 or arr.max() > num_classes):
            raise ValueError(f"{name} labels must lie in 1..{num_classes}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true - 1, pred - 1), 1)
    return cm


def _check(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("confusion matrix has negative entries")
    if cm.sum() == 0:
        raise MetricError("confusion matrix is empty")
    return cm.astype(np.float64)


def oa(cm) -> float:
    cm = _check(cm)
    return float(np.trace(cm) / cm.sum())


def aa(cm) -> float:
    """Mean producer's accuracy over classes that have at least one true sample."""
    cm = _check(cm)
    rows = cm.sum(axis=1)
    present = rows > 0
    return float(np.mean(np.diag(cm)[present] / rows[present]))


def kappa(cm) -> float:
    cm = _check(cm)
    n = cm.sum()
    po = np.trace(cm) / n
    pe = float(cm.sum(axis=1) @ cm.sum(axis=0)) / (n * n)
    if pe >= 1.0:
        raise MetricError("kappa is undefined when chance agreement is 1")
    return float((po - pe) / (1.0 - pe))


def check_weight_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"weight matrix must be square, got {w.shape}")
    if not np.all(np.diag(w) == 1.0):
        raise ValueError("weight matrix diagonal must be exactly 1")
    if np.any(w < 0) or np.any(w > 1) or not np.all(np.isfinite(w)):
        raise ValueError("weight matrix entries must lie in [0, 1]")
    return w


def wa(cm, weights) -> float:
    cm = _check(cm)
    w = check_weight_matrix(weights)
    if w.shape != cm.shape:
        raise ValueError(f"weight matrix {w.shape} does not match confusion matrix {cm.shape}")
    return float((w * cm).sum() / cm.sum())


def _group_accuracy(cm, group: slice, label: str) -> float:
    cm = _check(cm)
    rows = cm[group]
    total = rows.sum()
    if total == 0:
        raise MetricError(f"no {label} samples to score")
    return float(rows[:, group].sum() / total)


def oa_built(cm) -> float:
    """Fraction of built-type samples (LCZ 1-10) predicted as any built type."""
    return _group_accuracy(cm, BUILT, "built-up")


def oa_nonbuilt(cm) -> float:
    """Fraction of natural-type samples (LCZ A-G) predicted as any natural type."""
    return _group_accuracy(cm, NATURAL, "non-built-up")


def normalize_rows(cm) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    rows = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)


def all_metrics(cm, weights=None) -> dict[str, float]:
    """The six report metrics; ``weights`` defaults to the identity (WA == OA)."""
    cm = np.asarray(cm)
    if weights is None:
        weights = np.eye(cm.shape[0])
    return {"kappa": kappa(cm), "aa": aa(cm), "wa": wa(cm, weights), "oa": oa(cm),
            "oa_b": oa_built(cm), "oa_nb": oa_nonbuilt(cm)}


def read_weight_matrix(path: Union[str, Path]) -> np.ndarray:
    """17 x 17 CSV, row = true class; a non-numeric first row is treated as a header."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    try:
        float(rows[0][0])
    except (ValueError, IndexError):
        rows = rows[1:]
    try:
        w = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric weight entry ({exc})") from exc
    if w.shape != (NUM_CLASSES, NUM_CLASSES):
        raise ValueError(f"{path}: weight matrix must be 17 x 17, got {w.shape}")
    return check_weight_matrix(w)


def write_metrics_csv(metrics: dict[str, float], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(METRIC_COLUMNS)
        wr.writerow([repr(float(metrics[k])) for k in METRIC_COLUMNS])


def write_matrix_csv(mat, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(mat):
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row])
