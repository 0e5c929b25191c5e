"""Confusion matrices, per-class precision/recall/F1 and distribution summaries."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


def predict_class(logits, num_classes: int) -> np.ndarray:
    """Argmax over the first ``num_classes`` logits; extra output nodes are ignored.

    ``np.argmax`` returns the first maximum, so ties go to the lower index.
    """
    z = np.asarray(getattr(logits, "data", logits))
    if z.ndim != 2 or z.shape[1] < num_classes:
        raise ValueError(f"logits {z.shape} have fewer than {num_classes} columns")
    return np.argmax(z[:, :num_classes], axis=1)


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """``C x C`` counts, rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


@dataclass
class MetricsReport:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_f1: float
    accuracy: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def metrics(cm) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    total = int(cm.sum())
    return MetricsReport(
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        macro_f1=float(f1.mean()),
        accuracy=float(tp.sum() / total) if total else 0.0,
        n=total,
    )


def macro_f1(y_true, y_pred, num_classes: int) -> float:
    return metrics(confusion_matrix(y_true, y_pred, num_classes)).macro_f1


def summarize(values) -> dict:
    """Median, quartiles, IQR, min and max of a sample (linear-interpolated percentiles)."""
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
        "iqr": float(q3 - q1),
        "min": float(v.min()),
        "max": float(v.max()),
    }
