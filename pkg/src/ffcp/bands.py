"""Prediction bands for the regression methods.

Bands are closed intervals.  Arrays broadcast, so a band may describe one
point (shape (d_y,)) or a whole test set (shape (n, d_y)).  An infinite
quantile produces -inf/+inf bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PredictionBand:
    lower: np.ndarray
    upper: np.ndarray
    center: np.ndarray
    method: str = ""

    def __post_init__(self):
        if np.any(self.lower > self.upper):
            raise ValueError("band lower bound exceeds upper bound")

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def is_finite(self) -> np.ndarray:
        """Per-point flag: every coordinate bounded."""
        finite = np.isfinite(self.lower) & np.isfinite(self.upper)
        return finite if finite.ndim < 2 else finite.all(axis=-1)


def _arr(a):
    return np.asarray(a, dtype=np.float64)


def _halfwidth(scale, q):
    scale = _arr(scale)
    q = _arr(q)
    # 0 * inf would be NaN; a zero gradient gives a zero-width band
    with np.errstate(invalid="ignore"):
        return np.where(scale == 0, 0.0, scale * q)


def band_vanilla(yhat, q) -> PredictionBand:
    yhat = _arr(yhat)
    q = np.broadcast_to(_arr(q), yhat.shape)
    return PredictionBand(yhat - q, yhat + q, yhat, "vanilla")


def band_ffcp(yhat, grad_norms, q, method: str = "ffcp") -> PredictionBand:
    yhat = _arr(yhat)
    half = np.broadcast_to(_halfwidth(grad_norms, q), yhat.shape)
    return PredictionBand(yhat - half, yhat + half, yhat, method)


def band_fflcp(yhat, grad_norms, q_local) -> PredictionBand:
    """Like ``band_ffcp`` but with one quantile per test point.

    ``q_local`` has shape (n,) for n test points and is broadcast over
    output coordinates.
    """
    yhat = _arr(yhat)
    q = _arr(q_local)
    if yhat.ndim == 2 and q.ndim == 1:
        q = q[:, None]
    return band_ffcp(yhat, grad_norms, q, method="fflcp")


def band_cqr(lo, hi, q) -> PredictionBand:
    return band_ffcqr(lo, hi, 1.0, 1.0, q, method="cqr")


def band_ffcqr(lo, hi, gnorm_lo, gnorm_hi, q, method: str = "ffcqr") -> PredictionBand:
    """[lo - |grad lo| q, hi + |grad hi| q].

    CQR quantiles can be negative and shrink the interval; if that makes
    lower exceed upper the band collapses to the midpoint.
    """
    lo, hi = _arr(lo), _arr(hi)
    q = _arr(q)
    lower = lo - _halfwidth(gnorm_lo, q)
    upper = hi + _halfwidth(gnorm_hi, q)
    crossed = lower > upper
    if np.any(crossed):
        mid = 0.5 * (lower + upper)
        lower = np.where(crossed, mid, lower)
        upper = np.where(crossed, mid, upper)
    return PredictionBand(lower, upper, 0.5 * (lo + hi), method)


def contains(band: PredictionBand, y):
    """Closed-interval membership: (per-coordinate flags, all-coordinate flag)."""
    y = _arr(y)
    inside = (band.lower <= y) & (y <= band.upper)
    joint = inside if inside.ndim == 0 else inside.all(axis=-1)
    return inside, joint
