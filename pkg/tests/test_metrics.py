import numpy as np
import pytest

from conftest import pairwise_auc
from sptn import metrics


def test_auc_perfect_and_inverted():
    labels = np.array([0, 0, 1, 1])
    assert metrics.auc(np.array([0.1, 0.2, 0.8, 0.9]), labels) == 1.0
    assert metrics.auc(np.array([0.9, 0.8, 0.2, 0.1]), labels) == 0.0
    assert metrics.auc(np.array([0.5, 0.5, 0.5, 0.5]), labels) == 0.5


def test_auc_matches_pairwise_count_with_ties(rng):
    for trial in range(20):
        n = int(rng.integers(5, 60))
        # coarse quantization forces plenty of exact ties
        scores = np.round(rng.standard_normal(n) * 2) / 2
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        got = metrics.auc(scores, labels)
        ref = pairwise_auc(scores, labels)
        assert got == ref  # exact, including half-tie contributions


def test_auc_validation():
    with pytest.raises(ValueError):
        metrics.auc(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        metrics.auc(np.zeros(3), np.array([0, 1, 2]))
    with pytest.raises(ValueError):
        metrics.auc(np.zeros(3), np.zeros(3))  # one class only


def test_mean_loglik_is_plain_average(rng):
    vals = rng.standard_normal(17)
    assert metrics.mean_loglik(vals) == pytest.approx(vals.mean(), abs=0)
