"""
test_anomaly_model.py
"""

import sys
import math

import numpy as np
import pytest

sys.path.insert(0, "../..")
from fediot.models import anomaly_model
from fediot.models.anomaly_model import ConfusionMatrix, DetectionThreshold, Metrics
from fediot.models.exception import DataError

def two_pass_threshold(scores, alpha):
    n = len(scores)
    mean = math.fsum(scores) / n
    var = math.fsum((s - mean) ** 2 for s in scores) / n
    return mean + alpha * math.sqrt(var)

def test_threshold_matches_two_pass_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        scores = rng.exponential(0.01, size=int(rng.integers(2, 400)))
        alpha = float(rng.uniform(0.0, 5.0))
        threshold = anomaly_model.compute_threshold(scores, alpha)
        assert threshold.tr == pytest.approx(two_pass_threshold(list(scores), alpha), rel=1e-9)
        assert threshold.n_samples == len(scores)

def test_constant_scores_give_zero_std():
    threshold = anomaly_model.compute_threshold([1.0, 1.0], 3.0)
    assert threshold.tr == 1.0
    assert threshold.std_mse == 0.0

def test_population_std():
    threshold = anomaly_model.compute_threshold([0.0, 2.0], 1.0)
    assert threshold.mean_mse == 1.0
    assert threshold.std_mse == 1.0
    assert threshold.tr == 2.0

def test_chebyshev_bound():
    rng = np.random.default_rng(11)
    for alpha in (1.5, 2.0, 3.0):
        scores = rng.lognormal(-5, 1, size=2000)
        threshold = anomaly_model.compute_threshold(scores, alpha)
        above = np.mean(scores > threshold.tr)
        assert above <= 1.0 / alpha ** 2

@pytest.mark.parametrize("scores", [[0.5], [], [0.1, float("nan")], [0.1, -0.2], [np.inf, 1.0]])
def test_bad_scores(scores):
    with pytest.raises(DataError):
        anomaly_model.compute_threshold(scores, 3.0)

def test_detection_is_strictly_above():
    threshold = DetectionThreshold(tr=0.5, mean_mse=0.0, std_mse=0.0, alpha=3.0, n_samples=2)
    assert anomaly_model.detect([0.4, 0.5, 0.6], threshold).tolist() == [0, 0, 1]

def test_confusion_and_metrics():
    cm = anomaly_model.confusion([1, 1, 0, 0, 1, 0], [1, 0, 0, 0, 1, 1])
    assert cm == ConfusionMatrix(tp=2, tn=2, fp=1, fn=1)
    rates = anomaly_model.metrics(cm)
    assert rates.acc == pytest.approx(4 / 6)
    assert rates.fpr == pytest.approx(1 / 3)
    assert rates.tpr == pytest.approx(2 / 3)
    assert rates.fpr + rates.tnr == pytest.approx(1.0)

    with pytest.raises(ValueError):
        anomaly_model.confusion([1, 0], [1])

def test_published_style_row():
    # 2000 benign and 2000 attack rows
    cm = ConfusionMatrix(tp=1863, tn=1944, fp=56, fn=137)
    rates = anomaly_model.metrics(cm)
    assert rates.acc == pytest.approx(0.95175)
    assert rates.fpr == pytest.approx(0.028)
    assert rates.tnr == pytest.approx(0.972)
    assert rates.fpr + rates.tnr == pytest.approx(1.0)

def test_rates_without_a_class_are_not_applicable():
    rates = anomaly_model.metrics(ConfusionMatrix(tp=0, tn=5, fp=0, fn=0))
    assert rates.acc == 1.0
    assert rates.tpr is None
    assert rates.tnr == 1.0
    assert anomaly_model.format_rate(rates.tpr) == "n/a"
    assert anomaly_model.format_rate(rates.tnr) == "100.00%"
    with pytest.raises(ValueError):
        anomaly_model.metrics(ConfusionMatrix(0, 0, 0, 0))

def test_average_skips_not_applicable():
    averaged = anomaly_model.average_metrics([
        Metrics(acc=0.9, fpr=0.1, tpr=None, tnr=0.9),
        Metrics(acc=0.7, fpr=0.3, tpr=0.5, tnr=0.7),
    ])
    assert averaged.acc == pytest.approx(0.8)
    assert averaged.tpr == 0.5
    assert anomaly_model.average_metrics([Metrics(1.0, None, None, None)]).fpr is None

def test_evaluate_scores():
    threshold = DetectionThreshold(tr=1.0, mean_mse=0.0, std_mse=0.0, alpha=3.0, n_samples=2)
    cm, rates = anomaly_model.evaluate_scores([0.2, 3.0, 0.9, 1.5], [0, 1, 1, 0], threshold)
    assert cm == ConfusionMatrix(tp=1, tn=1, fp=1, fn=1)
    assert rates.acc == 0.5

def test_threshold_grows_with_alpha():
    rng = np.random.default_rng(17)
    for case in range(200):
        n = int(rng.integers(2, 200))
        scores = rng.exponential(scale=float(rng.uniform(1e-4, 1.0)), size=n)
        if case % 20 == 0:
            scores = np.full(n, scores[0])
        low, high = np.sort(rng.uniform(0.0, 10.0, size=2))
        loose = anomaly_model.compute_threshold(scores, alpha=low)
        strict = anomaly_model.compute_threshold(scores, alpha=high)
        assert loose.tr <= strict.tr
        flagged_loose = anomaly_model.detect(scores, loose).sum()
        flagged_strict = anomaly_model.detect(scores, strict).sum()
        assert flagged_strict <= flagged_loose
