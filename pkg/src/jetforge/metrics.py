"""Classification metrics: accuracy, confusion matrix, one-vs-rest ROC AUC."""

from dataclasses import dataclass

import numpy as np


def roc_curve(scores, positive):
    """False/true positive rates over every distinct score threshold.

    Thresholds sweep from high to low; tied scores enter together, which
    makes the trapezoid through a tie a straight diagonal segment.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positive[order]
    last_of_run = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[last_of_run]
    fps = last_of_run + 1 - tps
    n_pos, n_neg = y.sum(), len(y) - y.sum()
    return np.r_[0.0, fps / n_neg], np.r_[0.0, tps / n_pos]


def roc_auc(scores, positive):
    """Area under the ROC curve by trapezoidal integration.

    Returns None when ``positive`` holds only one class.
    """
    positive = np.asarray(positive, dtype=bool)
    if positive.all() or not positive.any():
        return None
    fpr, tpr = roc_curve(scores, positive)
    return float(np.trapezoid(tpr, fpr))


def confusion_matrix(labels, predictions, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


@dataclass
class EvalReport:
    accuracy: float
    auc: list
    loss: float
    confusion: np.ndarray

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "loss": self.loss,
            "confusion": self.confusion.tolist(),
        }


def report_from_probs(probs, labels):
    """Accuracy, per-class one-vs-rest AUC, mean NLL and confusion counts."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = probs.shape[1]
    pred = probs.argmax(axis=1)
    cm = confusion_matrix(labels, pred, k)
    acc = float(np.trace(cm) / max(cm.sum(), 1))
    auc = [roc_auc(probs[:, c], labels == c) for c in range(k)]
    eps = np.finfo(float).tiny
    nll = float(-np.log(np.maximum(probs[np.arange(len(labels)), labels], eps)).mean()) if len(labels) else 0.0
    return EvalReport(acc, auc, nll, cm)
