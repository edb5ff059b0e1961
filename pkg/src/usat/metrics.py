"""Accuracy, micro-average precision and macro-average precision."""
import numpy as np

from . import kernels
from .errors import NoPositivesError, ShapeError


def average_precision(scores, labels) -> float:
    """Step-interpolated AP: sum over positive hits of (R_n - R_{n-1}) * P_n.

    Items are ranked by descending score; ties keep their input order.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    if not np.all(np.isfinite(scores)):
        raise ShapeError("scores must be finite")
    if not np.any(labels > 0):
        raise NoPositivesError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    return float(kernels.ap_sorted((labels[order] > 0).astype(np.float64)))


def micro_ap(scores, labels) -> float:
    """AP over all flattened (sample, class) pairs."""
    return average_precision(np.asarray(scores).ravel(), np.asarray(labels).ravel())


def per_class_ap(scores, labels) -> np.ndarray:
    """AP per class column; NaN for classes without a positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    out = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        if np.any(labels[:, c] > 0):
            out[c] = average_precision(scores[:, c], labels[:, c])
    return out


def macro_ap(scores, labels) -> float:
    """Mean per-class AP over classes that have at least one positive."""
    aps = per_class_ap(scores, labels)
    if np.all(np.isnan(aps)):
        raise NoPositivesError("no class has a positive label")
    return float(np.nanmean(aps))


def accuracy(scores, labels) -> float:
    """Fraction of argmax predictions equal to the integer (or one-hot) label."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    return float(np.mean(scores.argmax(axis=1) == labels))


def evaluate(scores, labels, task: str = "multilabel") -> dict:
    if task == "single":
        return {"accuracy": accuracy(scores, labels)}
    return {"micro_ap": micro_ap(scores, labels), "macro_ap": macro_ap(scores, labels)}
