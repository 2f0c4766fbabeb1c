"""Whole-cloud comparison metrics, confusion matrices and evaluation reports."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateVarianceError, EmptyCloudError
from .geometry import atomic_write_text

__all__ = [
    "chamfer",
    "hausdorff",
    "pearson",
    "xi_rates",
    "map_to_binary",
    "binary_accuracy",
    "correction_selection",
    "confusion_matrix",
    "EvalReport",
    "evaluate_predictions",
    "save_report",
    "load_report",
    "confusion_to_csv",
    "scatter_to_csv",
]


def _pts(cloud) -> np.ndarray:
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=float)
    if pts.size == 0:
        raise EmptyCloudError("metric requires non-empty clouds")
    return np.atleast_2d(pts)


def _directed_nn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dist, _ = cKDTree(b).query(a)
    return dist


def chamfer(a, b) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a, b = _pts(a), _pts(b)
    return float(0.5 * (_directed_nn(a, b).mean() + _directed_nn(b, a).mean()))


def hausdorff(a, b) -> float:
    """Larger of the two directed max-min nearest-neighbor distances."""
    a, b = _pts(a), _pts(b)
    return float(max(_directed_nn(a, b).max(), _directed_nn(b, a).max()))


def pearson(x, y) -> float:
    """Product-moment correlation; rejects constant sequences."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two equally sized sequences of length >= 2")
    xd = x - x.mean()
    yd = y - y.mean()
    denom = np.sqrt((xd**2).sum() * (yd**2).sum())
    if denom == 0.0:
        raise DegenerateVarianceError("zero variance in correlation input")
    return float(np.clip((xd * yd).sum() / denom, -1.0, 1.0))


def xi_rates(pred, true, m: int) -> np.ndarray:
    """xi_k = fraction of samples whose prediction is at least k classes off.

    Returns the vector (xi_1, ..., xi_{m-1}).
    """
    pred = np.asarray(pred, dtype=int)
    true = np.asarray(true, dtype=int)
    if pred.shape != true.shape:
        raise ValueError("prediction and truth lengths differ")
    gaps = np.abs(pred - true)
    return np.array([(gaps >= k).mean() for k in range(1, m)])


def map_to_binary(pred_class: int, binary_classes: tuple[int, int]) -> tuple[float, float]:
    """Credit weights (low, high) for mapping a multinomial prediction onto
    two designated classes: full weight on the nearer class, split on ties."""
    c_low, c_high = binary_classes
    if not c_low < c_high:
        raise ValueError("binary classes must satisfy c_low < c_high")
    d_low = abs(pred_class - c_low)
    d_high = abs(pred_class - c_high)
    if d_low < d_high:
        return 1.0, 0.0
    if d_high < d_low:
        return 0.0, 1.0
    return 0.5, 0.5


def binary_accuracy(pred, true, binary_classes: tuple[int, int]) -> float:
    """Fractional-credit accuracy of mapped predictions on a binary task."""
    pred = np.asarray(pred, dtype=int)
    true = np.asarray(true, dtype=int)
    c_low, c_high = binary_classes
    total = 0.0
    for p, t in zip(pred, true):
        if t not in (c_low, c_high):
            raise ValueError(f"true label {t} outside the binary task classes")
        w_low, w_high = map_to_binary(int(p), binary_classes)
        total += w_low if t == c_low else w_high
    return total / len(pred)


def correction_selection(preds, threshold_class: int = 3) -> np.ndarray:
    """Indices predicted at or above the correction threshold class."""
    preds = np.asarray(preds, dtype=int)
    return np.flatnonzero(preds >= threshold_class)


def confusion_matrix(true, pred, m: int) -> np.ndarray:
    """m x m counts with rows = true class, columns = predicted class."""
    true = np.asarray(true, dtype=int)
    pred = np.asarray(pred, dtype=int)
    counts = np.zeros((m, m), dtype=int)
    np.add.at(counts, (true, pred), 1)
    return counts


@dataclass(frozen=True)
class EvalReport:
    """Accuracy, off-by-k rates, label correlation and the confusion matrix."""

    accuracy: float
    xi: np.ndarray
    pearson_r: float
    confusion: np.ndarray

    def to_json_dict(self) -> dict:
        return {
            "accuracy": float(self.accuracy),
            "xi": [float(v) for v in self.xi],
            "pearson_r": None if np.isnan(self.pearson_r) else float(self.pearson_r),
            "confusion": [[int(v) for v in row] for row in self.confusion],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "EvalReport":
        r = d.get("pearson_r")
        return EvalReport(
            float(d["accuracy"]),
            np.array(d["xi"], dtype=float),
            float("nan") if r is None else float(r),
            np.array(d["confusion"], dtype=int),
        )


def evaluate_predictions(pred, true, m: int) -> EvalReport:
    """Build the full report; correlation is NaN when either side is constant."""
    pred = np.asarray(pred, dtype=int)
    true = np.asarray(true, dtype=int)
    accuracy = float((pred == true).mean())
    try:
        r = pearson(pred, true)
    except DegenerateVarianceError:
        r = float("nan")
    return EvalReport(accuracy, xi_rates(pred, true, m), r, confusion_matrix(true, pred, m))


def save_report(report: EvalReport, path: str) -> None:
    atomic_write_text(path, json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n")


def load_report(path: str) -> EvalReport:
    with open(path) as fh:
        return EvalReport.from_json_dict(json.load(fh))


def confusion_to_csv(confusion: np.ndarray, path: str) -> None:
    m = confusion.shape[0]
    lines = ["true\\pred," + ",".join(str(j) for j in range(m))]
    for i in range(m):
        lines.append(f"{i}," + ",".join(str(int(v)) for v in confusion[i]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def scatter_to_csv(values: Sequence[tuple], path: str, header: str = "metric,epsilon") -> None:
    """Write (metric, epsilon) style pairs for external plotting."""
    lines = [header]
    for row in values:
        lines.append(",".join(repr(float(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")
