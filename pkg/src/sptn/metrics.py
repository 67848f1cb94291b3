"""Evaluation metrics: mean log-likelihood and ranking AUC."""

from __future__ import annotations

import numpy as np


def mean_loglik(logpdf_values: np.ndarray) -> float:
    """(1/n) sum of per-row log-densities."""
    values = np.asarray(logpdf_values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("no rows to average")
    return float(values.mean())


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Higher scores should indicate the positive class (label 1). Ties get
    midranks, so the result equals the exhaustive pairwise count
    (wins + half-ties) / (positives * negatives) exactly, halves included.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    pos = labels == 1
    neg = labels == 0
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")

    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # midrank of the tie group [i, j], 1-based: (i+1 + j+1)/2
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1

    u_stat = ranks[pos].sum() - 0.5 * n_pos * (n_pos + 1)
    return float(u_stat / (n_pos * n_neg))
