"""Classification metrics (ACC, weighted F1/precision, macro recall) and silhouette."""

from __future__ import annotations

from typing import Dict

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """Counts [C, C] with rows = true class and columns = predicted class."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} differ in length")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _safe_divide(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class_scores(cm: np.ndarray) -> Dict[str, np.ndarray]:
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    precision = _safe_divide(tp, predicted)
    recall = _safe_divide(tp, support)
    f1 = _safe_divide(2 * precision * recall, precision + recall)
    return {"precision": precision, "recall": recall, "f1": f1, "support": support}


def classification_report(preds, labels, num_classes: int) -> Dict[str, float]:
    """ACC, WF1, WP (support-weighted) and R (macro recall over supported classes).

    Classes with zero predictions or zero support score 0 for the affected
    quantity; zero-support classes carry no weight and are left out of R.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} differ in length")
    if preds.size == 0:
        raise ValueError("classification_report needs at least one instance")
    cm = confusion_matrix(preds, labels, num_classes)
    s = per_class_scores(cm)
    weights = s["support"] / s["support"].sum()
    supported = s["support"] > 0
    return {
        "ACC": float(np.trace(cm) / cm.sum()),
        "WF1": float((weights * s["f1"]).sum()),
        "WP": float((weights * s["precision"]).sum()),
        "R": float(s["recall"][supported].mean()),
    }


def silhouette(embeddings, labels) -> float:
    """Mean silhouette with Euclidean distance on L2-normalized rows."""
    return float(silhouette_samples(embeddings, labels).mean())


def _pairwise_distances(x, block=64):
    # explicit differences; the Gram-matrix shortcut loses digits for near neighbours
    out = np.empty((x.shape[0], x.shape[0]))
    for i in range(0, x.shape[0], block):
        diff = x[i:i + block, None, :] - x[None, :, :]
        out[i:i + block] = np.sqrt((diff * diff).sum(axis=-1))
    return out


def silhouette_samples(embeddings, labels) -> np.ndarray:
    """Per-instance silhouette values; instances alone in their cluster score 0."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ValueError(f"embeddings {x.shape} and labels {labels.shape} are inconsistent")
    if x.shape[0] < 3:
        raise UndefinedMetricError("silhouette needs at least 3 instances")
    classes, inverse = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise UndefinedMetricError("silhouette is undefined for a single class")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise UndefinedMetricError("silhouette: zero embedding cannot be normalized")
    x = x / norms
    dist = _pairwise_distances(x)
    onehot = np.eye(classes.size)[inverse]
    sizes = onehot.sum(axis=0)
    totals = dist @ onehot                       # [N, K] summed distance to each cluster
    own = sizes[inverse]
    a = _safe_divide(totals[np.arange(len(x)), inverse], own - 1)
    others = np.where(onehot > 0, np.inf, totals / sizes)
    b = others.min(axis=1)
    return np.where(own > 1, _safe_divide(b - a, np.maximum(a, b)), 0.0)
