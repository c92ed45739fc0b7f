"""Regularized adaptive prediction sets, with an optional gradient term.

The conformity score of a labelled point is

    E = (sorted probability mass up to the true label's rank L)
        + delta * ||grad g(v_hat)|| + lambda * max(L - k_reg, 0)

and with ``delta = 0`` this is plain RAPS.  The calibrated threshold is the
ceil((1 - alpha)(n + 1))-th *smallest* E by default; ``rank_direction =
"largest"`` takes the same rank counted from the top, for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .calib import conformal_rank
from .nnkit import MlpModel, head_jacobian, predict


@dataclass
class RapsConfig:
    alpha: float = 0.1
    lam: float = 0.01
    k_reg: int = 2
    delta: float = 0.0
    rank_direction: str = "smallest"

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.lam < 0 or self.k_reg < 0 or self.delta < 0:
            raise ValueError("lam, k_reg and delta must be non-negative")
        if self.rank_direction not in ("smallest", "largest"):
            raise ValueError("rank_direction is 'smallest' or 'largest'")


@dataclass(frozen=True)
class PredictionSet:
    classes: np.ndarray
    tau_hat: float

    @property
    def size(self) -> int:
        return len(self.classes)


def softmax_sorted(logits):
    """Stable softmax, sorted descending; ties keep class-index order.

    Works on a single logit vector or on rows of a matrix.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)
    perm = np.argsort(-probs, axis=-1, kind="stable")
    return np.take_along_axis(probs, perm, axis=-1), perm


def classifier_grad_norms(model: MlpModel, x, mode: str = "top1") -> np.ndarray:
    """Feature-gradient magnitude per input row.

    ``top1``: Euclidean norm of the gradient of the largest logit.
    ``frobenius``: Frobenius norm of the whole head Jacobian.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rows = head_jacobian(model, x).rows  # (n, K, d_v)
    if mode == "frobenius":
        return np.sqrt(np.sum(rows ** 2, axis=(1, 2)))
    if mode != "top1":
        raise ValueError(f"unknown gradient mode {mode!r}")
    top = np.argmax(predict(model, x), axis=1)
    return np.linalg.norm(rows[np.arange(x.shape[0]), top], axis=1)


def _penalty(ranks, config: RapsConfig):
    return config.lam * np.maximum(np.asarray(ranks) - config.k_reg, 0)


def raps_scores(logits, labels, grad_norms, config: RapsConfig) -> np.ndarray:
    probs, perm = softmax_sorted(np.atleast_2d(logits))
    labels = np.asarray(labels).reshape(-1)
    k = probs.shape[1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError("label out of range")
    ranks = np.argmax(perm == labels[:, None], axis=1) + 1
    mass = np.cumsum(probs, axis=1)[np.arange(len(labels)), ranks - 1]
    gn = np.broadcast_to(np.asarray(grad_norms, dtype=np.float64), mass.shape)
    return mass + config.delta * gn + _penalty(ranks, config)


def raps_calibrate(cal_logits, cal_labels, grad_norms, config: RapsConfig) -> float:
    scores = raps_scores(cal_logits, cal_labels, grad_norms, config)
    n = scores.size
    k = conformal_rank(n, config.alpha)
    if k > n:
        return math.inf
    ordered = np.sort(scores, kind="stable")
    if config.rank_direction == "largest":
        return float(ordered[n - k])
    return float(ordered[k - 1])


def raps_set_sizes(logits, grad_norms, tau_hat: float, config: RapsConfig):
    """Set sizes and class orderings for rows of ``logits``."""
    probs, perm = softmax_sorted(np.atleast_2d(logits))
    k = probs.shape[1]
    gn = np.asarray(grad_norms, dtype=np.float64).reshape(-1, 1)
    j = np.arange(1, k + 1)
    total = np.cumsum(probs, axis=1) + config.delta * gn + _penalty(j, config)[None, :]
    sizes = np.minimum(np.sum(total <= tau_hat, axis=1) + 1, k)
    return sizes, perm


def raps_predict(logits, grad_norm, tau_hat: float, config: RapsConfig) -> PredictionSet:
    sizes, perm = raps_set_sizes(np.asarray(logits)[None, :], [grad_norm], tau_hat,
                                 config)
    return PredictionSet(perm[0, :sizes[0]], tau_hat)


def set_coverage(sizes, perm, labels) -> np.ndarray:
    """Per-row flag: true label among the first ``size`` sorted classes."""
    labels = np.asarray(labels).reshape(-1)
    ranks = np.argmax(perm == labels[:, None], axis=1) + 1
    return ranks <= sizes
