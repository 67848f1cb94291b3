"""Dense Gaussian helpers shared by mixture expansion and marginal inference."""

from __future__ import annotations

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted log-sum-exp; tolerates -inf entries (all -inf -> -inf)."""
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(a - m).sum(axis=axis))
    return out + np.squeeze(m, axis=axis)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return logits - np.expand_dims(logsumexp(logits, axis=axis), axis)


def logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """N(mean, cov) log-density per row of x, via Cholesky."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    k = mean.shape[0]
    chol = np.linalg.cholesky(cov)
    diff = x - mean[None, :]
    # solve L z = diff^T; L is triangular but np.linalg.solve is fine at this scale
    z = np.linalg.solve(chol, diff.T)
    quad = (z**2).sum(axis=0)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (k * LOG_2PI + logdet + quad)


def pushforward(w: np.ndarray, b: np.ndarray, mean: np.ndarray, cov: np.ndarray):
    """Moments of W X + b for X ~ N(mean, cov); covariance symmetrized."""
    m2 = w @ mean + b
    c2 = w @ cov @ w.T
    return m2, 0.5 * (c2 + c2.T)


def submatrix(mean: np.ndarray, cov: np.ndarray, idx: np.ndarray):
    """Moments of the coordinate subset idx."""
    return mean[idx], cov[np.ix_(idx, idx)]
