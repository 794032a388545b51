"""
anomaly_model.py

Turns reconstruction errors into detections: the mean-plus-alpha-sigma
threshold, the decision rule, and the usual detection metrics (positive class
is malicious traffic).

"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .exception import DataError

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 3.0
NOT_APPLICABLE = None

@dataclass(frozen=True)
class DetectionThreshold:
    tr: float
    mean_mse: float
    std_mse: float
    alpha: float
    n_samples: int

@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

@dataclass(frozen=True)
class Metrics:
    """
    Detection rates in [0, 1]. A rate whose denominator is zero is ``None``
    (reported as ``n/a``), never a silent 0.
    """
    acc: float
    fpr: float
    tpr: float
    tnr: float

    def as_dict(self):
        return {"acc": self.acc, "fpr": self.fpr, "tpr": self.tpr, "tnr": self.tnr}

def compute_threshold(mse_scores, alpha=DEFAULT_ALPHA):
    """
    :param mse_scores: array-like

    At least two finite, non-negative reconstruction errors.

    :param alpha: float

    :return: ``DetectionThreshold``

    ``tr = mean + alpha * std`` where ``std`` is the population standard
    deviation (divide by N).
    """
    scores = np.asarray(mse_scores, dtype=np.float64).ravel()
    if scores.size < 2:
        raise DataError("A threshold needs at least 2 scores (got {})".format(scores.size))
    if not np.isfinite(scores).all() or (scores < 0).any():
        raise DataError("Scores must be finite and non-negative")
    mean = float(np.mean(scores))
    std = float(np.std(scores))
    return DetectionThreshold(
        tr=mean + alpha * std, mean_mse=mean, std_mse=std, alpha=float(alpha),
        n_samples=int(scores.size)
    )

def detect(scores, threshold):
    """
    :return: ``np.ndarray``

    1 where the score is strictly above ``threshold.tr``, else 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    return (scores > threshold.tr).astype(np.int8)

def confusion(pred, truth):
    """
    :return: ``ConfusionMatrix``

    :raises: ``ValueError``

    If the vectors differ in length.
    """
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError("Length mismatch: {} predictions, {} labels".format(
            pred.size, truth.size
        ))
    return ConfusionMatrix(
        tp=int(np.sum(pred & truth)), tn=int(np.sum(~pred & ~truth)),
        fp=int(np.sum(pred & ~truth)), fn=int(np.sum(~pred & truth)),
    )

def _ratio(numerator, denominator):
    return numerator / denominator if denominator else NOT_APPLICABLE

def metrics(cm):
    """
    :return: ``Metrics``

    ``acc = (tp + tn) / total``, ``fpr = fp / (tn + fp)``,
    ``tpr = tp / (tp + fn)``, ``tnr = tn / (tn + fp)``

    :raises: ``ValueError``

    If the matrix is empty.
    """
    if cm.total == 0:
        raise ValueError("Cannot compute metrics from an empty confusion matrix")
    return Metrics(
        acc=(cm.tp + cm.tn) / cm.total,
        fpr=_ratio(cm.fp, cm.tn + cm.fp),
        tpr=_ratio(cm.tp, cm.tp + cm.fn),
        tnr=_ratio(cm.tn, cm.tn + cm.fp),
    )

def evaluate_scores(scores, labels, threshold):
    """
    :return: ``tuple(ConfusionMatrix, Metrics)``
    """
    cm = confusion(detect(scores, threshold), labels)
    return cm, metrics(cm)

def average_metrics(all_metrics):
    """
    Mean of each rate over several models, skipping ``None`` entries.

    :return: ``Metrics``
    """
    averaged = {}
    for key in ("acc", "fpr", "tpr", "tnr"):
        values = [getattr(m, key) for m in all_metrics if getattr(m, key) is not None]
        averaged[key] = math.fsum(values) / len(values) if values else NOT_APPLICABLE
    return Metrics(**averaged)

def format_rate(value):
    return "n/a" if value is None else "{:.2f}%".format(100.0 * value)
