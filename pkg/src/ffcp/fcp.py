"""FCP baseline: feature-space scores plus band estimation.

Band estimation maps the feature ball {v : ||v - v_hat|| <= Q} through the
head g.  Two estimators are provided:

* ``estimate_band_ibp`` encloses the ball in the box v_hat +/- Q and pushes
  it through the head with interval arithmetic.  Sound but loose.
* ``estimate_band_sampling`` evaluates g at points inside the ball: the
  centre, the two points along +/- grad g(v_hat), a short projected
  gradient walk from each of those, and ``n_samples`` random points (even
  draws on the sphere, odd draws inside the ball).  Every candidate is
  feasible, so the result is an inner estimate.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .calib import conformal_quantile
from .nnkit import MlpModel, _act, features, predict
from .scores import FcpSearchConfig, _head_value, _head_value_and_grad, fcp_scores


@dataclass
class BandEstimatorConfig:
    n_samples: int = 1024
    seed: int = 0
    refine_steps: int = 10
    refine_step: float = 0.25
    chunk_size: int = 64

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass(frozen=True)
class BandEstimate:
    sound_lower: np.ndarray
    sound_upper: np.ndarray
    sampled_lower: np.ndarray
    sampled_upper: np.ndarray
    n_samples: int
    radius: float

    def containment_ok(self, atol: float = 1e-9) -> bool:
        return bool(np.all(self.sound_lower <= self.sampled_lower + atol)
                    and np.all(self.sampled_upper <= self.sound_upper + atol))


@dataclass
class FcpResult:
    estimate: BandEstimate
    cal_scores: np.ndarray
    cal_residuals: np.ndarray
    quantile: float
    prediction: np.ndarray
    runtime_seconds: float


def _as_rows(v):
    v = np.asarray(v, dtype=np.float64)
    return v[None, :] if v.ndim == 1 else v, v.ndim == 1


def estimate_band_ibp(model: MlpModel, v_hat, q: float):
    """Interval bound of g over the box v_hat +/- q (per row of v_hat).

    Returns (lower, upper) with shape (n, d_y), or (d_y,) for one point.
    """
    v, single = _as_rows(v_hat)
    if q < 0:
        raise ValueError("radius must be non-negative")
    if math.isinf(q):
        shape = (v.shape[0], model.d_out)
        lo, hi = np.full(shape, -math.inf), np.full(shape, math.inf)
    else:
        lo, hi = v - q, v + q
        for layer in model.head_layers():
            w_pos = np.maximum(layer.weight, 0.0)
            w_neg = np.minimum(layer.weight, 0.0)
            new_lo = lo @ w_pos.T + hi @ w_neg.T + layer.bias
            new_hi = hi @ w_pos.T + lo @ w_neg.T + layer.bias
            lo, hi = _act(new_lo, layer.activation), _act(new_hi, layer.activation)
    return (lo[0], hi[0]) if single else (lo, hi)


def ball_offsets(d: int, n_samples: int, seed: int) -> np.ndarray:
    """Unit-radius offsets: even rows on the sphere, odd rows inside the ball.

    Row i depends only on (seed, i), so a larger ``n_samples`` extends the
    set rather than replacing it.
    """
    z = np.random.default_rng(seed).standard_normal((n_samples, d + 1))
    directions = z[:, :d]
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    directions = directions / np.where(norms == 0, 1.0, norms)
    radius = ndtr(z[:, d]) ** (1.0 / d)
    radius[0::2] = 1.0
    return directions * radius[:, None]


def _refine(head, v_hat, start, q, sign, steps, step):
    """Projected normalized-gradient walk on the ball; best value seen."""
    v = start.copy()
    best = sign * _head_value(head, v)
    for _ in range(steps):
        _, grad = _head_value_and_grad(head, v)
        gnorm = np.linalg.norm(grad, axis=1, keepdims=True)
        v = v + sign * step * q * grad / np.where(gnorm == 0, 1.0, gnorm)
        off = v - v_hat
        onorm = np.linalg.norm(off, axis=1, keepdims=True)
        v = v_hat + off * np.minimum(1.0, q / np.where(onorm == 0, 1.0, onorm))
        best = np.maximum(best, sign * _head_value(head, v))
    return sign * best


def estimate_band_sampling(model: MlpModel, v_hat, q: float, n_samples: int = 1024,
                           seed: int = 0, refine: bool = True,
                           config: Optional[BandEstimatorConfig] = None):
    """Inner estimate of g over the L2 ball of radius q around each v_hat row."""
    config = config or BandEstimatorConfig(n_samples=n_samples, seed=seed)
    n_samples = config.n_samples
    if model.d_out != 1:
        raise ValueError("band estimation needs a scalar-output head")
    v, single = _as_rows(v_hat)
    head = model.head_layers()
    center = _head_value(head, v)
    if math.isinf(q):
        lo, hi = np.full(v.shape[0], -math.inf), np.full(v.shape[0], math.inf)
    elif q == 0:
        lo, hi = center.copy(), center.copy()
    else:
        lo, hi = center.copy(), center.copy()
        if refine:
            _, grad = _head_value_and_grad(head, v)
            gnorm = np.linalg.norm(grad, axis=1, keepdims=True)
            unit = grad / np.where(gnorm == 0, 1.0, gnorm)
            for sign in (1.0, -1.0):
                for start in (v + q * unit, v - q * unit):
                    val = _refine(head, v, start, q, sign, config.refine_steps,
                                  config.refine_step)
                    if sign > 0:
                        hi = np.maximum(hi, val)
                    else:
                        lo = np.minimum(lo, val)
        offsets = q * ball_offsets(v.shape[1], n_samples, config.seed)
        for start in range(0, v.shape[0], config.chunk_size):
            block = v[start:start + config.chunk_size]
            pts = (block[:, None, :] + offsets[None, :, :]).reshape(-1, v.shape[1])
            vals = _head_value(head, pts).reshape(block.shape[0], n_samples)
            sl = slice(start, start + block.shape[0])
            lo[sl] = np.minimum(lo[sl], vals.min(axis=1))
            hi[sl] = np.maximum(hi[sl], vals.max(axis=1))
    lo, hi = lo[:, None], hi[:, None]
    return (lo[0], hi[0]) if single else (lo, hi)


def estimate_band(model: MlpModel, v_hat, q: float,
                  config: Optional[BandEstimatorConfig] = None) -> BandEstimate:
    config = config or BandEstimatorConfig()
    s_lo, s_hi = estimate_band_ibp(model, v_hat, q)
    m_lo, m_hi = estimate_band_sampling(model, v_hat, q, config=config)
    est = BandEstimate(s_lo, s_hi, m_lo, m_hi, config.n_samples, q)
    if not est.containment_ok():
        raise AssertionError("sampled band escaped the interval bound")
    return est


def fcp_pipeline(model: MlpModel, x_cal, y_cal, x_test, alpha: float,
                 search_config: Optional[FcpSearchConfig] = None,
                 estimator_config: Optional[BandEstimatorConfig] = None) -> FcpResult:
    """Calibrate FCP and build bands for the test rows.

    The clock covers scoring, the quantile and band estimation; features of
    the test points are part of it, training is not.
    """
    y_cal = np.asarray(y_cal, dtype=np.float64).reshape(-1)
    if y_cal.size == 0:
        raise ValueError("empty calibration fold")
    t0 = time.perf_counter()
    scores, _, resid = fcp_scores(model, x_cal, y_cal, search_config)
    q = conformal_quantile(scores, alpha).value
    v_test = features(model, np.asarray(x_test, dtype=np.float64))
    est = estimate_band(model, v_test, q, estimator_config)
    elapsed = time.perf_counter() - t0
    pred = predict(model, x_test)
    return FcpResult(est, scores, resid, q, pred, elapsed)
