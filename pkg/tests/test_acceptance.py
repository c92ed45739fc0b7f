"""Acceptance criteria 1-11, each at its stated tolerance.

One test per criterion.  Each test attaches a one-line summary of the
measured quantities; ``conftest.py`` prints a PASS/FAIL line per criterion
at the end of the run.  The heavy synthetic pipeline (10 seeds, n = 10000)
is computed once per session and shared.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from ffcp import bench, experiments
from ffcp.bands import band_ffcp, band_vanilla
from ffcp.calib import (
    LocalizerWeights,
    conformal_quantile,
    weighted_conformal_quantile,
    weighted_quantile_batch,
)
from ffcp.data import gen_synthetic, gen_synthetic_hetero
from ffcp.fcp import fcp_pipeline
from ffcp.nnkit import features, head_forward, head_jacobian, mlp_init, predict
from ffcp.raps import RapsConfig
from ffcp.scores import score_fcp, score_ffcp, score_vanilla

ALPHA = 0.1
SEEDS = range(10)
SPLIT = 2
COVERAGE_METHODS = ("vanilla", "ffcp", "ffcqr", "fflcp", "fcp")


def detail(request, text):
    request.node.user_properties.append(("detail", text))


def binomial_std(p, n):
    return math.sqrt(p * (1 - p) / n)


@pytest.fixture(scope="session")
def synthetic():
    """Trained models and method outputs on gen_synthetic for every seed."""
    t0 = time.perf_counter()
    runs = []
    for seed in SEEDS:
        folds = experiments.make_folds(gen_synthetic(10000, seed=seed), seed)
        model = experiments.fit_regressor(folds, SPLIT, seed)
        qmodel = experiments.fit_quantile_regressor(folds, SPLIT, seed, ALPHA)
        outs = {m: experiments.run_regression_method(m, model, folds, ALPHA, qmodel=qmodel)
                for m in COVERAGE_METHODS}
        runs.append({"seed": seed, "folds": folds, "model": model, "outs": outs})
    return runs, time.perf_counter() - t0


def test_criterion_01_coverage_validity(synthetic, request):
    runs, elapsed = synthetic
    means = {m: float(np.mean([bench.coverage(r["outs"][m].band, r["folds"].y_test)
                               for r in runs])) for m in COVERAGE_METHODS}
    detail(request, " ".join(f"{m}={v:.4f}" for m, v in means.items())
           + f" runtime={elapsed:.0f}s")
    for m, v in means.items():
        assert 0.885 <= v <= 0.915, m
    assert elapsed < 600


def test_criterion_02_runtime_speedup(synthetic, request):
    runs, _ = synthetic
    r = runs[0]
    folds, model = r["folds"], r["model"]
    assert len(folds.y_cal) == 2500 and len(folds.y_test) == 2500
    times = {}
    for m in ("vanilla", "ffcp", "fcp"):
        times[m] = min(experiments.run_regression_method(m, model, folds, ALPHA).runtime_seconds
                       for _ in range(3))
    ratio = times["fcp"] / times["ffcp"]
    detail(request, " ".join(f"{m}={t:.4f}s" for m, t in times.items())
           + f" fcp/ffcp={ratio:.0f}x")
    assert ratio >= 10
    assert times["vanilla"] < times["ffcp"] and times["vanilla"] < times["fcp"]


def test_criterion_03_taylor_equivalence_affine_head(request):
    rng = np.random.default_rng(0)
    worst_score = 0.0
    for i in range(100):
        d_x, d_v = rng.integers(2, 8), rng.integers(2, 10)
        model = mlp_init([d_x, 12, d_v, 1], split_index=2, seed=i)
        x = rng.standard_normal(d_x)
        yhat = predict(model, x)
        y = yhat + rng.normal(0, 3, 1)
        s_fcp, _, _ = score_fcp(model, x, y)
        s_ffcp = float(score_ffcp(y, yhat, head_jacobian(model, x).row_norms)[0])
        worst_score = max(worst_score, abs(s_fcp - s_ffcp))

    model = mlp_init([5, 16, 8, 1], split_index=2, seed=123)
    x = rng.standard_normal((400, 5))
    y = predict(model, x) + rng.normal(0, 0.5, (400, 1))
    res = fcp_pipeline(model, x[:200], y[:200], x[200:], ALPHA)
    s = score_ffcp(y[:200], predict(model, x[:200]), head_jacobian(model, x[:200]).row_norms)
    band = band_ffcp(predict(model, x[200:]), head_jacobian(model, x[200:]).row_norms,
                     conformal_quantile(s, ALPHA).value)
    rel = max(np.max(np.abs(res.estimate.sampled_lower - band.lower) / np.abs(band.lower)),
              np.max(np.abs(res.estimate.sampled_upper - band.upper) / np.abs(band.upper)))
    detail(request, f"max|score diff|={worst_score:.2e} max band rel diff={rel:.2e}")
    assert worst_score <= 1e-4
    assert rel <= 1e-3


def test_criterion_04_score_correlation(synthetic, request):
    r = synthetic[0][0]
    fcp_scores = np.asarray(r["outs"]["fcp"].cal_scores).reshape(-1)
    ffcp_scores = np.asarray(r["outs"]["ffcp"].cal_scores).reshape(-1)
    corr = bench.score_correlation(fcp_scores, ffcp_scores)
    detail(request, f"pearson r={corr:.4f} over {fcp_scores.size} calibration scores")
    assert corr > 0.8


def _brute_quantile(scores, alpha):
    need = (1 - Fraction(str(alpha))) * (len(scores) + 1)
    for t in sorted(set(scores)):
        if sum(1 for s in scores if s <= t) >= need:
            return t
    return math.inf


def test_criterion_05_quantile_oracle(request):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(0, 13))
        alpha = float(rng.choice([0.05, 0.1, 0.25, 0.5]))
        # small integer pool forces ties
        scores = rng.integers(0, 6, n).astype(float).tolist()
        q = conformal_quantile(scores, alpha).value
        if q != _brute_quantile(scores, alpha):
            mismatches += 1
        if n:
            w = LocalizerWeights.from_raw(np.ones(n))
            if weighted_conformal_quantile(scores, w, alpha).value != q:
                mismatches += 1
    detail(request, f"mismatches={mismatches} over 1000 multisets")
    assert mismatches == 0


def _kink_free(model, x, margin=1e-3):
    a = x
    for layer in model.layers[:-1]:
        z = layer.weight @ a + layer.bias
        if layer.activation == "relu" and np.any(np.abs(z) <= margin):
            return False
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return True


def test_criterion_06_jacobian_finite_differences(request):
    rng = np.random.default_rng(6)
    worst, cases, h = 0.0, 0, 1e-5
    while cases < 200:
        dims = [int(d) for d in rng.integers(1, 9, size=int(rng.integers(2, 5)))]
        model = mlp_init(dims, split_index=int(rng.integers(0, len(dims))),
                         seed=int(rng.integers(1 << 30)))
        x = rng.standard_normal(dims[0])
        if not _kink_free(model, x):
            continue
        cases += 1
        v = features(model, x)
        fd = np.empty((model.d_out, v.size))
        for i in range(v.size):
            e = np.zeros_like(v)
            e[i] = h
            fd[:, i] = (head_forward(model, v + e) - head_forward(model, v - e)) / (2 * h)
        jac = head_jacobian(model, x).rows
        # entries that are exactly zero (dead units) are compared absolutely
        err = np.abs(jac - fd) / np.maximum(np.abs(fd), 1e-8)
        worst = max(worst, float(err.max()))
    detail(request, f"max relative error={worst:.2e} over {cases} cases")
    assert worst < 1e-4


def test_criterion_07_efficiency_heteroscedastic(request):
    cov = {s: [] for s in ["vanilla", 0, 1, 2, 3, 4]}
    length = {s: [] for s in cov}
    for seed in SEEDS:
        folds = experiments.make_folds(gen_synthetic_hetero(10000, seed=seed), seed)
        base = experiments.fit_regressor(folds, 0, seed)
        out = experiments.run_regression_method("vanilla", base, folds, ALPHA)
        cov["vanilla"].append(bench.coverage(out.band, folds.y_test))
        length["vanilla"].append(bench.mean_band_length(out.band)[0])
        for s in range(base.n_layers + 1):
            out = experiments.run_regression_method("ffcp", base.with_split(s), folds, ALPHA)
            cov[s].append(bench.coverage(out.band, folds.y_test))
            length[s].append(bench.mean_band_length(out.band)[0])
    mean_cov = {k: float(np.mean(v)) for k, v in cov.items()}
    mean_len = {k: float(np.mean(v)) for k, v in length.items()}
    eligible = [s for s in range(5) if mean_cov[s] >= mean_cov["vanilla"]]
    best = min(eligible, key=lambda s: mean_len[s]) if eligible else None
    detail(request, " ".join(f"{k}:cov={mean_cov[k]:.4f},len={mean_len[k]:.4f}"
                             for k in cov) + f" best_split={best}")
    assert best is not None
    assert mean_len[best] <= mean_len["vanilla"]


def test_criterion_08_square_conditions(synthetic, request):
    r = synthetic[0][0]
    s_out = np.asarray(r["outs"]["vanilla"].cal_scores).reshape(-1)
    s_feat = np.asarray(r["outs"]["ffcp"].cal_scores).reshape(-1)
    out, feat, expansion = bench.square_condition_check(s_out, s_feat, ALPHA)
    detail(request, f"M|Q-s| feature={feat.mean_abs_gap:.4f} output={out.mean_abs_gap:.4f} "
           f"relative feature={feat.mean_abs_gap_relative:.4f} "
           f"output={out.mean_abs_gap_relative:.4f} "
           f"expansion lhs={expansion['lhs']:.4f} rhs={expansion['rhs']:.4f}")
    assert feat.mean_abs_gap < out.mean_abs_gap


def test_criterion_09_untrained_control(request):
    folds = experiments.make_folds(gen_synthetic(10000, seed=0), 0)
    base = experiments.fit_regressor(folds, 0, 0, trained=False)
    van = experiments.run_regression_method("vanilla", base, folds, ALPHA)
    v_len = bench.mean_band_length(van.band)[0]
    ratios = []
    for s in range(base.n_layers + 1):
        out = experiments.run_regression_method("ffcp", base.with_split(s), folds, ALPHA)
        ratios.append(bench.mean_band_length(out.band)[0] / v_len)
    detail(request, f"vanilla length={v_len:.4f} ffcp/vanilla by split="
           + ",".join(f"{r:.3f}" for r in ratios))
    assert all(abs(r - 1) <= 0.10 for r in ratios)


def test_criterion_10_ffraps(request):
    covered = {"raps": [], "ffraps": []}
    all_sizes, identical = [], True
    for trial in range(20):
        ds = experiments.gen_classification(2000, seed=trial)
        folds = experiments.make_folds(ds, trial, scale=False)
        model = experiments.fit_classifier(folds, 10, trial)
        c_r, s_r, tau_r, _ = experiments.run_raps(model, folds, RapsConfig(alpha=ALPHA))
        c_f, s_f, _, _ = experiments.run_raps(model, folds, RapsConfig(alpha=ALPHA, delta=0.01))
        c_0, s_0, tau_0, _ = experiments.run_raps(
            model, folds, RapsConfig(alpha=ALPHA, delta=0.0))
        identical &= tau_0 == tau_r and np.array_equal(s_0, s_r) and np.array_equal(c_0, c_r)
        covered["raps"].append(c_r)
        covered["ffraps"].append(c_f)
        all_sizes += [s_r, s_f]
    n = sum(len(c) for c in covered["raps"])
    floor = 0.9 - 3 * binomial_std(0.9, n)
    cov = {k: float(np.mean(np.concatenate(v))) for k, v in covered.items()}
    sizes = np.concatenate(all_sizes)
    detail(request, f"raps={cov['raps']:.4f} ffraps={cov['ffraps']:.4f} floor={floor:.4f} "
           f"delta0_identical={identical} sizes=[{sizes.min()},{sizes.max()}]")
    assert cov["raps"] >= floor and cov["ffraps"] >= floor
    assert identical
    assert sizes.min() >= 1 and sizes.max() <= 10


def test_criterion_11_reduction_identities(synthetic, request):
    r = synthetic[0][0]
    folds, model = r["folds"], r["model"]
    pred_cal, pred_test = predict(model, folds.x_cal), predict(model, folds.x_test)

    s_unit = score_ffcp(folds.y_cal, pred_cal, np.ones_like(pred_cal))
    q_unit = conformal_quantile(s_unit.ravel(), ALPHA).value
    q_van = conformal_quantile(score_vanilla(folds.y_cal, pred_cal).ravel(), ALPHA).value
    a, b = band_ffcp(pred_test, np.ones_like(pred_test), q_unit), band_vanilla(pred_test, q_van)
    unit_ok = np.array_equal(a.lower, b.lower) and np.array_equal(a.upper, b.upper)

    last = model.with_split(model.n_layers)
    van = experiments.run_regression_method("vanilla", last, folds, ALPHA)
    ff = experiments.run_regression_method("ffcp", last, folds, ALPHA)
    last_ok = np.array_equal(bench.coverage_indicators(van.band, folds.y_test),
                             bench.coverage_indicators(ff.band, folds.y_test))

    gn_cal = head_jacobian(model, folds.x_cal).row_norms
    gn_test = head_jacobian(model, folds.x_test).row_norms
    s = score_ffcp(folds.y_cal, pred_cal, gn_cal).ravel()
    uniform = np.full((len(folds.y_test), s.size), 1.0 / s.size)
    q_local = weighted_quantile_batch(s, uniform, ALPHA)
    lcp = band_ffcp(pred_test, gn_test, q_local[:, None], method="fflcp")
    ffcp = band_ffcp(pred_test, gn_test, conformal_quantile(s, ALPHA).value)
    local_ok = np.array_equal(lcp.lower, ffcp.lower) and np.array_equal(lcp.upper, ffcp.upper)

    detail(request, f"unit_grad={unit_ok} last_split={last_ok} uniform_localizer={local_ok}")
    assert unit_ok and last_ok and local_ok
