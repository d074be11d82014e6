"""Accuracy, macro precision and macro F1 from a confusion matrix, plus a direct-count twin."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Metrics:
    accuracy: float
    precision: float
    f1: float
    confusion: np.ndarray  # [C, C], rows true, columns predicted
    classes: np.ndarray

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "f1": self.f1,
                "classes": self.classes.tolist(), "confusion": self.confusion.tolist()}


def _check(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    y_true = np.asarray(y_true).astype(np.int64).ravel()
    y_pred = np.asarray(y_pred).astype(np.int64).ravel()
    if y_true.size == 0:
        raise ValueError("empty test set")
    if y_true.shape != y_pred.shape:
        raise ValueError("label and prediction counts differ")
    return y_true, y_pred


def confusion_matrix(y_true, y_pred, classes=None) -> tuple[np.ndarray, np.ndarray]:
    y_true, y_pred = _check(y_true, y_pred)
    classes = np.union1d(y_true, y_pred) if classes is None else np.asarray(classes)
    index = {int(c): i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    np.add.at(cm, ([index[int(t)] for t in y_true], [index[int(p)] for p in y_pred]), 1)
    return cm, classes


def _safe_div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.divide(a, b, out=np.zeros_like(a, dtype=np.float64), where=b != 0)


def metrics_from_confusion(cm: np.ndarray, classes=None) -> Metrics:
    """Macro averages over every class that occurs as a label or a prediction; 0/0 counts as 0."""
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(0).astype(np.float64))
    recall = _safe_div(tp, cm.sum(1).astype(np.float64))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    classes = np.arange(len(cm)) if classes is None else np.asarray(classes)
    return Metrics(float(tp.sum() / cm.sum()), float(precision.mean()), float(f1.mean()), cm, classes)


def compute_metrics(y_true, y_pred) -> Metrics:
    cm, classes = confusion_matrix(y_true, y_pred)
    return metrics_from_confusion(cm, classes)


def metrics_by_counting(y_true, y_pred) -> tuple[float, float, float]:
    """Same quantities by explicit per-class counting; kept independent of the matrix path."""
    y_true, y_pred = _check(y_true, y_pred)
    labels = sorted(set(y_true.tolist()) | set(y_pred.tolist()))
    correct = sum(int(t == p) for t, p in zip(y_true, y_pred))
    precisions, f1s = [], []
    for c in labels:
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        predicted = sum(1 for p in y_pred if p == c)
        actual = sum(1 for t in y_true if t == c)
        prec = tp / predicted if predicted else 0.0
        rec = tp / actual if actual else 0.0
        precisions.append(prec)
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return correct / len(y_true), sum(precisions) / len(labels), sum(f1s) / len(labels)


def evaluate(predict_fn, images, labels) -> Metrics:
    """Run ``predict_fn(images) -> class ids`` and score it against ``labels``."""
    if len(labels) == 0:
        raise ValueError("empty test set")
    return compute_metrics(labels, predict_fn(images))
