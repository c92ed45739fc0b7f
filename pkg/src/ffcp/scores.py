"""Non-conformity scores.

The gradient-normalized scores divide a residual by the norm of the
corresponding row of the head Jacobian.  Norms below ``GRAD_FLOOR`` are
clamped; every clamp is tallied in ``floor_counter`` so reports can surface
dead-feature cases.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nnkit import MlpModel, _act, _act_grad, features

GRAD_FLOOR = 1e-12
METHODS = ("vanilla", "ffcp", "cqr", "ffcqr", "fcp", "lcp", "fflcp")

floor_counter: Counter = Counter()


@dataclass(frozen=True)
class ScoreSet:
    method: str
    scores: np.ndarray
    grad_norms: Optional[np.ndarray] = None
    split_index: Optional[int] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if self.method in ("vanilla", "fcp", "lcp") and np.any(self.scores < 0):
            raise ValueError("residual scores must be non-negative")

    def __len__(self):
        return self.scores.shape[0]


@dataclass
class FcpSearchConfig:
    """Settings for the surrogate-feature search behind the FCP score.

    Each iteration is a gradient step on (g(v) - y)^2 whose length is scaled
    by 1 / (2 ||grad g(v)||^2), i.e. a Gauss-Newton step of size
    ``step_size``; a step that fails to shrink the residual is halved, up to
    ``max_halvings`` times.  Convergence is declared once
    |g(v) - y| <= residual_tol * (1 + |y|).
    """

    max_iters: int = 200
    step_size: float = 1.0
    residual_tol: float = 1e-4
    max_halvings: int = 20
    restarts: int = 1
    restart_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.step_size > 0 and self.residual_tol > 0):
            raise ValueError("step_size and residual_tol must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input to score function")


def _floored(grad_norms: np.ndarray) -> np.ndarray:
    grad_norms = np.asarray(grad_norms, dtype=np.float64)
    if np.any(grad_norms < 0):
        raise ValueError("gradient norms must be non-negative")
    hits = int(np.count_nonzero(grad_norms < GRAD_FLOOR))
    if hits:
        floor_counter["grad_floor"] += hits
    return np.maximum(grad_norms, GRAD_FLOOR)


def score_vanilla(y, yhat) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yhat.shape}")
    _finite(y, yhat)
    return np.abs(y - yhat)


def score_ffcp(y, yhat, grad_norms) -> np.ndarray:
    resid = score_vanilla(y, yhat)
    _finite(grad_norms)
    return resid / _floored(np.broadcast_to(grad_norms, resid.shape))


def score_cqr(y, lo, hi) -> np.ndarray:
    y, lo, hi = (np.asarray(a, dtype=np.float64) for a in (y, lo, hi))
    _finite(y, lo, hi)
    return np.maximum(lo - y, y - hi)


def score_ffcqr(y, lo, hi, gnorm_lo, gnorm_hi) -> np.ndarray:
    y, lo, hi = (np.asarray(a, dtype=np.float64) for a in (y, lo, hi))
    _finite(y, lo, hi, gnorm_lo, gnorm_hi)
    return np.maximum((lo - y) / _floored(gnorm_lo), (y - hi) / _floored(gnorm_hi))


# -- FCP surrogate-feature search -------------------------------------------

def _head_value_and_grad(head, v):
    """g(v) and dg/dv for a scalar-output head, batched over rows of v."""
    pre = []
    a = v
    for layer in head:
        z = a @ layer.weight.T + layer.bias
        pre.append(z)
        a = _act(z, layer.activation)
    if not head:
        return v[:, 0].copy(), np.ones_like(v)
    grad = np.ones((v.shape[0], 1))
    for layer, z in zip(reversed(head), reversed(pre)):
        grad = (grad * _act_grad(z, layer.activation)) @ layer.weight
    return a[:, 0], grad


def _head_value(head, v):
    a = v
    for layer in head:
        a = _act(a @ layer.weight.T + layer.bias, layer.activation)
    return a[:, 0]


def surrogate_search(model: MlpModel, v_start, y, config: FcpSearchConfig):
    """Find v near v_start with g(v) = y, for every row at once.

    Rows iterate independently and freeze once converged, so batching only
    changes results at the level of floating-point rounding.
    Returns (v, residual).
    """
    head = model.head_layers()
    if model.d_out != 1:
        raise ValueError("FCP search needs a scalar-output head")
    v = np.array(v_start, dtype=np.float64, copy=True)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    tol = config.residual_tol * (1.0 + np.abs(y))
    value, grad = _head_value_and_grad(head, v)
    resid = value - y
    active = np.abs(resid) > tol
    for _ in range(config.max_iters):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        g = grad[idx]
        gsq = np.sum(g * g, axis=1)
        stuck = gsq < GRAD_FLOOR ** 2
        direction = -(resid[idx] / np.where(stuck, 1.0, gsq))[:, None] * g
        step = np.full(idx.size, config.step_size)
        cand = v[idx] + step[:, None] * direction
        cand_val = _head_value(head, cand)
        worse = np.abs(cand_val - y[idx]) >= np.abs(resid[idx])
        for _ in range(config.max_halvings):
            if not worse.any():
                break
            step[worse] *= 0.5
            cand[worse] = v[idx][worse] + step[worse, None] * direction[worse]
            cand_val[worse] = _head_value(head, cand[worse])
            worse = np.abs(cand_val - y[idx]) >= np.abs(resid[idx])
        # no improving step left: the row has stalled
        moved = ~worse & ~stuck
        upd = idx[moved]
        v[upd] = cand[moved]
        new_val, new_grad = _head_value_and_grad(head, v[upd])
        resid[upd] = new_val - y[upd]
        grad[upd] = new_grad
        active[idx[~moved]] = False
        active[upd] = np.abs(resid[upd]) > tol[upd]
    return v, np.abs(resid)


def fcp_scores(model: MlpModel, x, y, config: Optional[FcpSearchConfig] = None):
    """Batched FCP scores: (scores, v_star, residuals) for rows of x."""
    config = config or FcpSearchConfig()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    _finite(y)
    v_hat = features(model, x)
    best_v, best_r = surrogate_search(model, v_hat, y, config)
    best_s = np.linalg.norm(best_v - v_hat, axis=1)
    if config.restarts > 1:
        rng = np.random.default_rng(config.seed)
        for _ in range(config.restarts - 1):
            scale = config.restart_scale * (1.0 + best_s)[:, None]
            start = v_hat + scale * rng.standard_normal(v_hat.shape)
            v, r = surrogate_search(model, start, y, config)
            s = np.linalg.norm(v - v_hat, axis=1)
            tol = config.residual_tol * (1.0 + np.abs(y))
            ok_new = r <= tol
            ok_old = best_r <= tol
            better = (ok_new & (~ok_old | (s < best_s))) | (~ok_new & ~ok_old & (r < best_r))
            best_v[better], best_r[better], best_s[better] = v[better], r[better], s[better]
    return best_s, best_v, best_r


def score_fcp(model: MlpModel, x, y, config: Optional[FcpSearchConfig] = None):
    """Distance from h(x) to the nearest found v with g(v) = y.

    The search is local, so the score is an upper bound on the true
    infimum whenever the returned residual is within tolerance.
    """
    s, v, r = fcp_scores(model, np.asarray(x, dtype=np.float64)[None, :],
                         np.asarray([y], dtype=np.float64).reshape(-1), config)
    return float(s[0]), v[0], float(r[0])
