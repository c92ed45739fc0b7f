"""Finite-sample conformal quantiles.

The calibration scores are augmented with a point mass at +inf, so the
(1 - alpha) quantile is the k-th smallest score with
k = ceil((1 - alpha)(n + 1)), or +inf when k > n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist


@dataclass(frozen=True)
class ConformalQuantile:
    alpha: float
    n: int
    k: int
    value: float

    @property
    def is_finite(self) -> bool:
        return math.isfinite(self.value)


@dataclass(frozen=True)
class LocalizerWeights:
    raw: np.ndarray
    normalized: np.ndarray

    @classmethod
    def from_raw(cls, raw) -> "LocalizerWeights":
        raw = np.asarray(raw, dtype=np.float64)
        if raw.size == 0:
            raise ValueError("empty localizer weights")
        if not np.all(np.isfinite(raw)) or np.any(raw < 0):
            raise ValueError("localizer weights must be finite and non-negative")
        total = raw.sum(axis=-1, keepdims=True)
        if np.any(total <= 0):
            raise ValueError("localizer weights are all zero")
        return cls(raw, raw / total)


def _check_alpha(alpha: float) -> None:
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def _check_scores(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if np.any(np.isnan(scores)):
        raise ValueError("NaN calibration score")
    if np.any(np.isinf(scores)):
        raise ValueError("infinite calibration score")
    return scores


def conformal_rank(n: int, alpha: float) -> int:
    # guard against (1 - alpha)(n + 1) landing a hair above an integer
    return int(math.ceil((1.0 - alpha) * (n + 1) - 1e-12))


def conformal_quantile(scores, alpha: float) -> ConformalQuantile:
    """Scores may be negative (CQR-style); only NaN and inf are rejected."""
    _check_alpha(alpha)
    scores = _check_scores(scores)
    n = scores.size
    k = conformal_rank(n, alpha)
    if k > n:
        return ConformalQuantile(alpha, n, k, math.inf)
    value = np.sort(scores, kind="stable")[max(k, 1) - 1]
    return ConformalQuantile(alpha, n, k, float(value))


def conformal_quantile_columns(scores, alpha: float) -> np.ndarray:
    """Per-column quantile values for an (n, d) score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[:, None]
    return np.array([conformal_quantile(scores[:, j], alpha).value
                     for j in range(scores.shape[1])])


def weighted_conformal_quantile(scores, weights: LocalizerWeights,
                                alpha: float) -> ConformalQuantile:
    """Quantile of sum_i w_i * n/(n+1) * delta_{s_i} + 1/(n+1) * delta_inf."""
    _check_alpha(alpha)
    scores = _check_scores(scores)
    n = scores.size
    w = np.asarray(weights.normalized, dtype=np.float64).reshape(-1)
    if w.size != n:
        raise ValueError("weights and scores differ in length")
    if n == 0:
        return ConformalQuantile(alpha, 0, 1, math.inf)
    value = float(weighted_quantile_batch(scores, w[None, :], alpha)[0])
    return ConformalQuantile(alpha, n, -1, value)


def weighted_quantile_batch(scores, normalized_weights, alpha: float) -> np.ndarray:
    """Weighted conformal quantiles for many query points at once.

    ``normalized_weights`` is (m, n), each row summing to 1.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    w = np.atleast_2d(np.asarray(normalized_weights, dtype=np.float64))
    n = scores.size
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    mass = np.cumsum(w[:, order], axis=1) * (n / (n + 1.0))
    target = 1.0 - alpha
    # tolerance keeps uniform weights in agreement with the integer-rank rule
    hit = mass >= target - 1e-12
    reached = hit.any(axis=1)
    first = np.argmax(hit, axis=1)
    out = np.full(w.shape[0], math.inf)
    out[reached] = sorted_scores[first[reached]]
    return out


def median_heuristic_bandwidth(points, max_points: int = 2000, seed: int = 0) -> float:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.shape[0] > max_points:
        idx = np.random.default_rng(seed).choice(points.shape[0], max_points,
                                                 replace=False)
        points = points[idx]
    if points.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(points)))
    return med if med > 0 else 1.0


def gaussian_kernel_weights(query, cal, bandwidth: float) -> np.ndarray:
    """exp(-||q - c||^2 / (2 b^2)) for every (query row, cal row) pair."""
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    cal = np.atleast_2d(np.asarray(cal, dtype=np.float64))
    sq = (np.sum(query ** 2, axis=1)[:, None] + np.sum(cal ** 2, axis=1)[None, :]
          - 2.0 * query @ cal.T)
    np.maximum(sq, 0.0, out=sq)
    logk = -sq / (2.0 * bandwidth ** 2)
    # shift per row so the nearest point keeps weight 1 instead of underflowing
    logk -= logk.max(axis=1, keepdims=True)
    return np.exp(logk)


def localizer_weights(x_query, x_cal, bandwidth="auto") -> LocalizerWeights:
    """Gaussian-kernel localizer weights of the calibration points.

    ``raw`` is the unshifted kernel value for a single query; normalized
    weights are what the weighted quantile consumes.
    """
    x_cal = np.asarray(x_cal, dtype=np.float64)
    if x_cal.ndim == 1:
        x_cal = x_cal[:, None]
    if x_cal.shape[0] == 0:
        raise ValueError("empty calibration set")
    if bandwidth == "auto":
        bandwidth = median_heuristic_bandwidth(x_cal)
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    q = np.asarray(x_query, dtype=np.float64).reshape(1, -1)
    sq = np.sum((x_cal - q) ** 2, axis=1)
    raw = np.exp(-sq / (2.0 * bandwidth ** 2))
    if raw.sum() <= 0:
        # every point underflowed; fall back to the shifted kernel
        raw = gaussian_kernel_weights(q, x_cal, bandwidth)[0]
    return LocalizerWeights.from_raw(raw)
