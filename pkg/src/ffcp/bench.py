"""Evaluation metrics, phase timing and report output."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .bands import PredictionBand, contains
from .calib import conformal_quantile

REPORT_SCHEMA = "ffcp-bench-report"
REPORT_SCHEMA_VERSION = 1


@dataclass
class BenchReport:
    method: str
    dataset: str
    seed: int
    split_index: Optional[int]
    alpha: float
    coverage: float
    mean_length: float
    group_coverage_min: float
    runtime_seconds: float
    score_correlation: Optional[float] = None
    infinite_band_count: int = 0
    grad_floor_count: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError("coverage must lie in [0, 1]")
        if self.runtime_seconds < 0 or self.infinite_band_count < 0:
            raise ValueError("runtime and counts must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


FIELDS = [f.name for f in dataclasses.fields(BenchReport)]


def coverage_indicators(band: PredictionBand, y_test) -> np.ndarray:
    y = np.asarray(y_test, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    _, joint = contains(band, y)
    return np.atleast_1d(joint)


def coverage(band: PredictionBand, y_test) -> float:
    ind = coverage_indicators(band, y_test)
    if ind.size == 0:
        raise ValueError("empty test set")
    return float(np.mean(ind))


def band_lengths(band: PredictionBand) -> np.ndarray:
    """Per-point length averaged over output coordinates (inf if unbounded)."""
    width = np.asarray(band.width, dtype=np.float64)
    if width.ndim == 1:
        width = width[:, None]
    return width.mean(axis=1)


def mean_band_length(band: PredictionBand):
    """(mean length over finite bands, number of infinite bands excluded)."""
    lengths = band_lengths(band)
    finite = np.isfinite(lengths)
    if not finite.any():
        raise ValueError("every band is infinite")
    return float(lengths[finite].mean()), int((~finite).sum())


def tertile_groups(y) -> np.ndarray:
    """Group index 0/1/2 by empirical tertiles; ties at a cut go to the lower group."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size < 3:
        raise ValueError("group coverage needs at least 3 test points")
    lo, hi = np.quantile(y, [1.0 / 3.0, 2.0 / 3.0])
    return np.where(y <= lo, 0, np.where(y <= hi, 1, 2))


def group_coverage(band: PredictionBand, y_test):
    """(minimum group coverage, per-group coverage) over response tertiles.

    An empty group (possible with heavy ties) reports NaN and is ignored by
    the minimum.
    """
    ind = coverage_indicators(band, y_test)
    groups = tertile_groups(y_test)
    per = np.array([ind[groups == g].mean() if np.any(groups == g) else np.nan
                    for g in range(3)])
    return float(np.nanmin(per)), per


def time_phase(fn: Callable[[], object]):
    """Run ``fn`` once; return (result, wall seconds) from a monotonic clock."""
    t0 = time.perf_counter()
    result = fn()
    return result, time.perf_counter() - t0


def score_correlation(a, b) -> float:
    a = np.asarray(getattr(a, "scores", a), dtype=np.float64).reshape(-1)
    b = np.asarray(getattr(b, "scores", b), dtype=np.float64).reshape(-1)
    if a.size != b.size or a.size < 2:
        raise ValueError("need two score vectors of equal length >= 2")
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0:
        raise ValueError("zero variance score vector")
    return float(da @ db) / denom


@dataclass(frozen=True)
class SquareConditionReport:
    space: str
    quantile: float
    mean_gap: float  # M[Q - s]
    mean_abs_gap: float  # M|Q - s|
    mean_abs_gap_relative: float  # M|Q - s| / Q
    quantile_std: float  # across bootstrap subsamples
    quantile_shift: float  # mean |Q(subsample) - Q(full)|
    n: int
    lipschitz: float = 1.0
    exponent: float = 1.0
    c: float = 1.0


def _square_report(space, scores, alpha, n_boot, rng, lipschitz, exponent, c):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    q = conformal_quantile(scores, alpha).value
    gaps = q - scores
    n = scores.size
    boot = []
    for _ in range(n_boot):
        idx = rng.integers(0, n, size=n)
        boot.append(conformal_quantile(scores[idx], alpha).value)
    boot = np.asarray(boot)
    rel = float(np.mean(np.abs(gaps)) / q) if q > 0 else 0.0
    return SquareConditionReport(space, q, float(gaps.mean()), float(np.mean(np.abs(gaps))),
                                 rel, float(boot.std()), float(np.mean(np.abs(boot - q))),
                                 n, lipschitz, exponent, c)


def square_condition_check(scores_output, scores_feature_normalized, alpha: float,
                           n_boot: int = 50, seed: int = 0, lipschitz: float = 1.0,
                           exponent: float = 1.0, c: float = 1.0):
    """Reports for output-space residuals and gradient-normalized scores.

    Returns (output_report, feature_report, expansion) where ``expansion``
    holds both sides of the expansion inequality

        L * M|Q(s_f) - s_f|^exponent  <  M[Q(s_o) - s_o] - 2 max(L, 1) (c / sqrt(n))^min(exponent, 1)

    evaluated with the configured constants.  Nothing is asserted.
    """
    rng = np.random.default_rng(seed)
    out = _square_report("output", scores_output, alpha, n_boot, rng, lipschitz, exponent, c)
    rng = np.random.default_rng(seed)
    feat = _square_report("feature", scores_feature_normalized, alpha, n_boot, rng,
                          lipschitz, exponent, c)
    s_f = np.asarray(scores_feature_normalized, dtype=np.float64).reshape(-1)
    lhs = lipschitz * float(np.mean(np.abs(feat.quantile - s_f) ** exponent))
    rhs = out.mean_gap - 2 * max(lipschitz, 1.0) * (c / math.sqrt(out.n)) ** min(exponent, 1.0)
    expansion = {"lhs": lhs, "rhs": rhs, "holds": bool(lhs < rhs)}
    return out, feat, expansion


# -- aggregation and output -------------------------------------------------

AGG_METRICS = ("coverage", "mean_length", "group_coverage_min", "runtime_seconds")


def aggregate(reports: Sequence[BenchReport], keys=("method", "dataset", "split_index")):
    """Mean and population std of each metric per group of reports."""
    groups: dict = {}
    for r in reports:
        groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(r)
    rows = []
    for key, members in groups.items():
        row = dict(zip(keys, key))
        row["n_seeds"] = len(members)
        for m in AGG_METRICS:
            vals = np.array([getattr(r, m) for r in members], dtype=np.float64)
            with np.errstate(invalid="ignore"):  # inf lengths give a NaN std
                row[m + "_mean"] = float(vals.mean())
                row[m + "_std"] = float(vals.std())
        rows.append(row)
    return rows


def fmt_pm(mean: float, std: float, digits: int = 3) -> str:
    return f"{mean:.{digits}f}±{std:.{digits}f}"


def markdown_tables(reports: Sequence[BenchReport]) -> str:
    rows = aggregate(reports)
    lines = ["| method | dataset | split | coverage (%) | length | group cov (%) | time (s) |",
             "|---|---|---|---|---|---|---|"]
    for r in rows:
        split = "-" if r["split_index"] is None else str(r["split_index"])
        lines.append(
            f"| {r['method']} | {r['dataset']} | {split} | "
            f"{fmt_pm(100 * r['coverage_mean'], 100 * r['coverage_std'])} | "
            f"{fmt_pm(r['mean_length_mean'], r['mean_length_std'])} | "
            f"{fmt_pm(100 * r['group_coverage_min_mean'], 100 * r['group_coverage_min_std'], 2)} | "
            f"{fmt_pm(r['runtime_seconds_mean'], r['runtime_seconds_std'], 4)} |")
    speed = faster_ratios(rows)
    if speed:
        lines += ["", "| dataset | vanilla (s) | fcp (s) | ffcp (s) | faster |",
                  "|---|---|---|---|---|"]
        for ds, t in speed.items():
            lines.append(f"| {ds} | {t['vanilla']:.4f} | {t['fcp']:.4f} | "
                         f"{t['ffcp']:.4f} | {t['ratio']:.0f}x |")
    return "\n".join(lines) + "\n"


def faster_ratios(rows) -> dict:
    """FCP time / FFCP time per dataset (needs both methods present)."""
    times: dict = {}
    for r in rows:
        times.setdefault(r["dataset"], {}).setdefault(r["method"], []).append(
            r["runtime_seconds_mean"])
    out = {}
    for ds, t in times.items():
        if "fcp" in t and "ffcp" in t:
            ffcp = min(t["ffcp"])
            out[ds] = {"vanilla": min(t.get("vanilla", [float("nan")])),
                       "fcp": min(t["fcp"]), "ffcp": ffcp,
                       "ratio": min(t["fcp"]) / ffcp if ffcp > 0 else math.inf}
    return out


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def reports_to_json(reports: Sequence[BenchReport]) -> str:
    doc = {"schema": REPORT_SCHEMA, "version": REPORT_SCHEMA_VERSION,
           "fields": FIELDS,
           "reports": [_json_safe(r.to_dict()) for r in reports],
           "aggregate": _json_safe(aggregate(reports))}
    return json.dumps(doc, indent=2)


def reports_from_json(text: str) -> list:
    doc = json.loads(text)
    if doc.get("schema") != REPORT_SCHEMA:
        raise ValueError("not a bench report document")
    if doc.get("version") != REPORT_SCHEMA_VERSION:
        raise ValueError(f"unsupported report version {doc.get('version')}")
    out = []
    for r in doc["reports"]:
        r = {k: (float(v) if v in ("inf", "-inf") else v) for k, v in r.items()}
        out.append(BenchReport(**r))
    return out


def reports_to_csv(reports: Sequence[BenchReport]) -> str:
    buf = io.StringIO()
    cols = [f for f in FIELDS if f != "extra"]
    writer = csv.writer(buf)
    writer.writerow(cols)
    for r in reports:
        writer.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in cols])
    return buf.getvalue()


def emit_report(reports: Sequence[BenchReport], fmt: str, path) -> Path:
    if not reports:
        raise ValueError("no reports to emit")
    render = {"json": reports_to_json, "csv": reports_to_csv,
              "markdown": markdown_tables}.get(fmt)
    if render is None:
        raise ValueError(f"unknown report format {fmt!r}")
    path = Path(path)
    try:
        path.write_text(render(reports), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path
