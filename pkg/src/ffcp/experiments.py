"""End-to-end runs: data -> folds -> trained model -> method -> report."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import bench
from .bands import (PredictionBand, band_cqr, band_ffcp, band_ffcqr, band_fflcp,
                    band_vanilla)
from .calib import (conformal_quantile, conformal_quantile_columns,
                    gaussian_kernel_weights, median_heuristic_bandwidth,
                    weighted_quantile_batch)
from .data import (DEFAULT_RATIOS, Dataset, gen_synthetic, gen_synthetic_hetero,
                   load_csv, split, standardize)
from .fcp import BandEstimatorConfig, fcp_pipeline
from .nnkit import MlpModel, TrainConfig, features, head_jacobian, mlp_init, predict, train
from .raps import (RapsConfig, classifier_grad_norms, raps_calibrate, raps_set_sizes,
                   set_coverage)
from .scores import (FcpSearchConfig, floor_counter, score_cqr, score_ffcp, score_ffcqr,
                     score_vanilla)

log = logging.getLogger(__name__)

REGRESSION_METHODS = ("vanilla", "ffcp", "fcp", "cqr", "ffcqr", "lcp", "fflcp")
CLASSIFICATION_METHODS = ("raps", "ffraps")
ALL_METHODS = REGRESSION_METHODS + CLASSIFICATION_METHODS
HIDDEN = (64, 64, 64)


@dataclass
class Folds:
    x_train: np.ndarray
    y_train: np.ndarray
    x_cal: np.ndarray
    y_cal: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    scaler: object = None


def make_folds(ds: Dataset, seed: int, ratios=DEFAULT_RATIOS,
               scale: bool = True) -> Folds:
    fold = split(ds, ratios, seed)
    scaler = None
    if scale:
        ds, scaler = standardize(ds, fold)
    x, y = ds.features, ds.targets
    return Folds(x[fold.train_idx], y[fold.train_idx], x[fold.cal_idx], y[fold.cal_idx],
                 x[fold.test_idx], y[fold.test_idx], scaler)


def regression_dims(d_x: int, d_y: int, hidden=HIDDEN) -> list:
    return [d_x, *hidden, d_y]


def fit_regressor(folds: Folds, split_index: int, seed: int,
                  train_config: Optional[TrainConfig] = None, hidden=HIDDEN,
                  trained: bool = True) -> MlpModel:
    cfg = train_config or TrainConfig(seed=seed)
    model = mlp_init(regression_dims(folds.x_train.shape[1], folds.y_train.shape[1], hidden),
                     split_index=split_index, seed=seed)
    if trained:
        model = train(model, folds.x_train, folds.y_train, cfg)
    return model


def fit_quantile_regressor(folds: Folds, split_index: int, seed: int, alpha: float,
                           train_config: Optional[TrainConfig] = None,
                           hidden=HIDDEN) -> MlpModel:
    cfg = dataclasses.replace(train_config or TrainConfig(seed=seed), loss="pinball",
                              quantile_levels=(alpha / 2, 1 - alpha / 2))
    model = mlp_init(regression_dims(folds.x_train.shape[1], 2, hidden),
                     split_index=split_index, output_kind="quantile_pair", seed=seed)
    return train(model, folds.x_train, folds.y_train[:, :1], cfg)


def grad_norms(model: MlpModel, x) -> np.ndarray:
    """Per-sample, per-output-coordinate Jacobian row norms, shape (n, d_y)."""
    return head_jacobian(model, x).row_norms


@dataclass
class MethodOutput:
    method: str
    band: PredictionBand
    runtime_seconds: float
    cal_scores: np.ndarray
    quantile: object
    extra: dict = field(default_factory=dict)


# -- individual methods -----------------------------------------------------
# Each *_phase function is exactly the timed part: scores, quantile, band.

def vanilla_phase(model, x_cal, y_cal, x_test, alpha):
    scores = score_vanilla(y_cal, predict(model, x_cal))
    q = conformal_quantile_columns(scores, alpha)
    return band_vanilla(predict(model, x_test), q), scores, q


def ffcp_phase(model, x_cal, y_cal, x_test, alpha):
    scores = score_ffcp(y_cal, predict(model, x_cal), grad_norms(model, x_cal))
    q = conformal_quantile_columns(scores, alpha)
    band = band_ffcp(predict(model, x_test), grad_norms(model, x_test), q)
    return band, scores, q


def _localized_quantiles(scores, q_points, c_points, alpha, bandwidth):
    if bandwidth == "auto":
        bandwidth = median_heuristic_bandwidth(c_points)
    w = gaussian_kernel_weights(q_points, c_points, bandwidth)
    w /= w.sum(axis=1, keepdims=True)
    scores = np.asarray(scores).reshape(scores.shape[0], -1)
    return np.stack([weighted_quantile_batch(scores[:, j], w, alpha)
                     for j in range(scores.shape[1])], axis=1)


def lcp_phase(model, x_cal, y_cal, x_test, alpha, gradient: bool, space: str = "input",
              bandwidth="auto"):
    pred_cal = predict(model, x_cal)
    if gradient:
        scores = score_ffcp(y_cal, pred_cal, grad_norms(model, x_cal))
    else:
        scores = score_vanilla(y_cal, pred_cal)
    if space == "feature":
        c_pts, q_pts = features(model, x_cal), features(model, x_test)
    else:
        c_pts, q_pts = x_cal, x_test
    q = _localized_quantiles(scores, q_pts, c_pts, alpha, bandwidth)
    pred = predict(model, x_test)
    if gradient:
        band = band_ffcp(pred, grad_norms(model, x_test), q, method="fflcp")
    else:
        band = band_vanilla(pred, q)
    return band, scores, q


def cqr_phase(qmodel, x_cal, y_cal, x_test, alpha, gradient: bool):
    y = np.asarray(y_cal).reshape(-1)
    out = predict(qmodel, x_cal)
    if gradient:
        gn = grad_norms(qmodel, x_cal)
        scores = score_ffcqr(y, out[:, 0], out[:, 1], gn[:, 0], gn[:, 1])
    else:
        scores = score_cqr(y, out[:, 0], out[:, 1])
    q = conformal_quantile(scores, alpha).value
    out_t = predict(qmodel, x_test)
    lo, hi = out_t[:, :1], out_t[:, 1:2]
    if gradient:
        gt = grad_norms(qmodel, x_test)
        band = band_ffcqr(lo, hi, gt[:, :1], gt[:, 1:2], q)
    else:
        band = band_cqr(lo, hi, q)
    return band, scores, q


def run_regression_method(method: str, model: MlpModel, folds: Folds, alpha: float,
                          qmodel: Optional[MlpModel] = None,
                          search_config: Optional[FcpSearchConfig] = None,
                          estimator_config: Optional[BandEstimatorConfig] = None,
                          localizer_space: str = "input",
                          bandwidth="auto") -> MethodOutput:
    args = (folds.x_cal, folds.y_cal, folds.x_test, alpha)
    if method == "vanilla":
        (band, s, q), t = bench.time_phase(lambda: vanilla_phase(model, *args))
    elif method == "ffcp":
        (band, s, q), t = bench.time_phase(lambda: ffcp_phase(model, *args))
    elif method in ("lcp", "fflcp"):
        (band, s, q), t = bench.time_phase(lambda: lcp_phase(
            model, *args, gradient=method == "fflcp", space=localizer_space,
            bandwidth=bandwidth))
    elif method in ("cqr", "ffcqr"):
        if qmodel is None:
            raise ValueError(f"{method} needs a quantile-pair model")
        (band, s, q), t = bench.time_phase(lambda: cqr_phase(
            qmodel, *args, gradient=method == "ffcqr"))
    elif method == "fcp":
        res = fcp_pipeline(model, folds.x_cal, folds.y_cal, folds.x_test, alpha,
                           search_config, estimator_config)
        est = res.estimate
        band = PredictionBand(est.sampled_lower, est.sampled_upper, res.prediction, "fcp")
        sound = PredictionBand(est.sound_lower, est.sound_upper, res.prediction, "fcp-ibp")
        extra = {
            "sound_coverage": bench.coverage(sound, folds.y_test),
            "sound_mean_length": _safe_length(sound),
            "unconverged_scores": int(np.sum(
                res.cal_residuals > (search_config or FcpSearchConfig()).residual_tol
                * (1 + np.abs(folds.y_cal.reshape(-1))))),
        }
        return MethodOutput("fcp", band, res.runtime_seconds, res.cal_scores, res.quantile,
                            extra)
    else:
        raise ValueError(f"unknown regression method {method!r}")
    return MethodOutput(method, band, t, s, q)


def _safe_length(band):
    try:
        return bench.mean_band_length(band)[0]
    except ValueError:
        return math.inf


def to_report(out: MethodOutput, y_test, dataset: str, seed: int, split_index, alpha,
              correlation: Optional[float] = None) -> bench.BenchReport:
    cov = bench.coverage(out.band, y_test)
    try:
        length, n_inf = bench.mean_band_length(out.band)
    except ValueError:
        length, n_inf = math.inf, len(y_test)
    y_flat = np.asarray(y_test)[:, 0]
    gmin, _ = bench.group_coverage(out.band, y_flat[:, None]) if len(y_flat) >= 3 else (cov, None)
    return bench.BenchReport(out.method, dataset, seed, split_index, alpha, cov, length, gmin,
                             out.runtime_seconds, correlation, n_inf,
                             int(floor_counter.get("grad_floor", 0)), dict(out.extra))


# -- classification ---------------------------------------------------------

def gen_classification(n: int, k: int = 10, d_x: int = 20, seed: int = 0,
                       spread: float = 1.0) -> Dataset:
    """Gaussian class clusters: centres ~ N(0, spread^2 I), unit noise."""
    rng = np.random.default_rng(seed)
    centers = spread * rng.standard_normal((k, d_x))
    labels = rng.integers(0, k, size=n)
    x = centers[labels] + rng.standard_normal((n, d_x))
    names = tuple(f"x{i}" for i in range(d_x))
    return Dataset(x, labels[:, None].astype(np.float64), names, ("label",),
                   f"classes(n={n},k={k},d={d_x},seed={seed})")


def fit_classifier(folds: Folds, k: int, seed: int, hidden=(64, 64),
                   train_config: Optional[TrainConfig] = None) -> MlpModel:
    # 3 affine layers, split before the last two
    cfg = dataclasses.replace(train_config or TrainConfig(seed=seed, epochs=30),
                              loss="cross_entropy")
    model = mlp_init([folds.x_train.shape[1], *hidden, k], split_index=1,
                     output_kind="logits", seed=seed)
    return train(model, folds.x_train, folds.y_train[:, 0], cfg)


def run_raps(model: MlpModel, folds: Folds, config: RapsConfig, grad_mode: str = "top1"):
    """Returns (coverage flags, set sizes, tau_hat, seconds)."""
    def phase():
        gn_cal = classifier_grad_norms(model, folds.x_cal, grad_mode) if config.delta else 0.0
        tau = raps_calibrate(predict(model, folds.x_cal), folds.y_cal[:, 0].astype(int),
                             gn_cal, config)
        gn_test = (classifier_grad_norms(model, folds.x_test, grad_mode) if config.delta
                   else np.zeros(len(folds.x_test)))
        sizes, perm = raps_set_sizes(predict(model, folds.x_test), gn_test, tau, config)
        return sizes, perm, tau

    (sizes, perm, tau), t = bench.time_phase(phase)
    covered = set_coverage(sizes, perm, folds.y_test[:, 0].astype(int))
    return covered, sizes, tau, t


# -- run configuration ------------------------------------------------------

@dataclass
class RunConfig:
    method: str = "ffcp"
    alpha: float = 0.1
    seed: int = 0
    split_index: object = 2  # int or "sweep"
    dataset: str = "synthetic"  # synthetic | synthetic-hetero | classes | csv
    n: int = 10000
    d_x: int = 100
    csv_path: Optional[str] = None
    targets: list = field(default_factory=list)
    ratios: tuple = DEFAULT_RATIOS
    untrained: bool = False
    train: dict = field(default_factory=dict)
    fcp_search: dict = field(default_factory=dict)
    estimator: dict = field(default_factory=dict)
    raps: dict = field(default_factory=dict)
    localizer: dict = field(default_factory=lambda: {"space": "input", "bandwidth": "auto"})
    output: Optional[str] = None
    format: str = "json"

    def validate(self) -> None:
        errors = []
        if self.method not in ALL_METHODS:
            errors.append(f"method: unknown {self.method!r}")
        if not 0 < self.alpha < 1:
            errors.append("alpha: must lie in (0, 1)")
        if not (self.split_index == "sweep" or isinstance(self.split_index, int)):
            errors.append("split_index: integer or 'sweep'")
        if self.dataset not in ("synthetic", "synthetic-hetero", "classes", "csv"):
            errors.append(f"dataset: unknown {self.dataset!r}")
        if self.dataset == "csv" and (not self.csv_path or not self.targets):
            errors.append("csv_path/targets: required for csv datasets")
        if self.method in CLASSIFICATION_METHODS and self.dataset != "classes":
            errors.append("dataset: raps/ffraps run on the 'classes' dataset")
        if self.method in REGRESSION_METHODS and self.dataset == "classes":
            errors.append("dataset: 'classes' is for raps/ffraps only")
        if self.format not in ("json", "csv", "markdown"):
            errors.append(f"format: unknown {self.format!r}")
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1) > 1e-9:
            errors.append("ratios: three values summing to 1")
        if errors:
            raise ValueError("invalid run config: " + "; ".join(errors))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ratios"] = list(self.ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"invalid run config: unknown fields {sorted(unknown)}")
        d = dict(d)
        if "ratios" in d:
            d["ratios"] = tuple(d["ratios"])
        return cls(**d)


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset == "synthetic":
        return gen_synthetic(cfg.n, cfg.d_x, seed=cfg.seed)
    if cfg.dataset == "synthetic-hetero":
        return gen_synthetic_hetero(cfg.n, cfg.d_x, seed=cfg.seed)
    if cfg.dataset == "classes":
        return gen_classification(cfg.n, seed=cfg.seed)
    return load_csv(cfg.csv_path, cfg.targets)


def run(cfg: RunConfig) -> list:
    """Execute one configured run; a split sweep yields one report per split."""
    cfg.validate()
    floor_counter.clear()
    ds = load_dataset(cfg)
    name = cfg.dataset if cfg.dataset != "csv" else ds.provenance
    train_cfg = TrainConfig(**{"seed": cfg.seed, **cfg.train})

    if cfg.method in CLASSIFICATION_METHODS:
        folds = make_folds(ds, cfg.seed, cfg.ratios, scale=False)
        k = int(ds.targets.max()) + 1
        model = fit_classifier(folds, k, cfg.seed)
        rcfg = RapsConfig(**{"alpha": cfg.alpha, **cfg.raps})
        if cfg.method == "raps":
            rcfg = dataclasses.replace(rcfg, delta=0.0)
        elif rcfg.delta == 0:
            rcfg = dataclasses.replace(rcfg, delta=0.01)
        covered, sizes, tau, t = run_raps(model, folds, rcfg)
        return [bench.BenchReport(cfg.method, name, cfg.seed, model.split_index, cfg.alpha,
                                  float(covered.mean()), float(sizes.mean()),
                                  float(covered.mean()), t,
                                  extra={"tau_hat": tau, "max_set_size": int(sizes.max())})]

    folds = make_folds(ds, cfg.seed, cfg.ratios)
    base = fit_regressor(folds, 0, cfg.seed, train_cfg, trained=not cfg.untrained)
    qbase = None
    if cfg.method in ("cqr", "ffcqr"):
        qbase = fit_quantile_regressor(folds, 0, cfg.seed, cfg.alpha, train_cfg)
    n_layers = base.n_layers
    splits = list(range(n_layers + 1)) if cfg.split_index == "sweep" else [cfg.split_index]
    search = FcpSearchConfig(**cfg.fcp_search)
    estimator = BandEstimatorConfig(**{"seed": cfg.seed, **cfg.estimator})
    reports = []
    for s in splits:
        if not 0 <= s <= n_layers:
            raise ValueError(f"invalid run config: split_index {s} outside [0, {n_layers}]")
        floor_counter.clear()
        out = run_regression_method(
            cfg.method, base.with_split(s), folds, cfg.alpha,
            qmodel=qbase.with_split(s) if qbase is not None else None,
            search_config=search, estimator_config=estimator,
            localizer_space=cfg.localizer.get("space", "input"),
            bandwidth=cfg.localizer.get("bandwidth", "auto"))
        reports.append(to_report(out, folds.y_test, name, cfg.seed, s, cfg.alpha))
    if cfg.split_index == "sweep":
        best = min(reports, key=lambda r: r.mean_length)
        reports.append(dataclasses.replace(
            best, method=f"{cfg.method}-best",
            extra={**best.extra, "selected_min_length": True}))
    return reports
