"""Datasets: synthetic generators, a strict CSV loader, fold splitting."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.5, 0.25, 0.25)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, d_x)
    targets: np.ndarray  # (n, d_y)
    feature_names: tuple = ()
    target_names: tuple = ()
    provenance: str = ""

    def __post_init__(self):
        if self.features.ndim != 2 or self.targets.ndim != 2:
            raise DataError("features and targets must be 2-d arrays")
        if self.features.shape[0] != self.targets.shape[0]:
            raise DataError("features and targets differ in row count")
        if self.features.shape[0] < 1:
            raise DataError("dataset is empty")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.targets))):
            raise DataError("dataset contains non-finite values")

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx) -> "Dataset":
        return replace(self, features=self.features[idx], targets=self.targets[idx])


@dataclass(frozen=True)
class FoldSplit:
    train_idx: np.ndarray
    cal_idx: np.ndarray
    test_idx: np.ndarray
    seed: int


@dataclass(frozen=True)
class Standardizer:
    """Affine transform fitted on the training fold.

    Columns with zero variance get scale 1 (passed through unchanged).
    """

    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray

    def transform(self, ds: Dataset) -> Dataset:
        return replace(ds, features=(ds.features - self.x_mean) / self.x_scale,
                       targets=(ds.targets - self.y_mean) / self.y_scale)

    def inverse(self, ds: Dataset) -> Dataset:
        return replace(ds, features=ds.features * self.x_scale + self.x_mean,
                       targets=ds.targets * self.y_scale + self.y_mean)

    def targets_to_original(self, y):
        return np.asarray(y) * self.y_scale + self.y_mean

    def lengths_to_original(self, lengths):
        return np.asarray(lengths) * self.y_scale


def _names(prefix: str, k: int) -> tuple:
    return tuple(f"{prefix}{i}" for i in range(k))


def gen_synthetic(n: int, d_x: int = 100, seed: int = 0,
                  noise_scale: float = 1.0) -> Dataset:
    """Y = W X + eps with X ~ U[0,1]^d_x, W ~ N(0, 1) fixed per seed, eps ~ N(0, 1)."""
    if n < 1:
        raise DataError("n must be >= 1")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((1, d_x))
    x = rng.uniform(0.0, 1.0, size=(n, d_x))
    eps = rng.standard_normal((n, 1))
    y = x @ w.T + noise_scale * eps
    return Dataset(x, y, _names("x", d_x), ("y",), f"synthetic(n={n},d={d_x},seed={seed})")


def gen_synthetic_hetero(n: int, d_x: int = 100, seed: int = 0,
                         noise_scale: float = 1.0, zero_w2: bool = False) -> Dataset:
    """Y = W X + |W2 X| * eps, W2 ~ N(0, 1/d_x) fixed per seed.

    W, X and eps are drawn exactly as in ``gen_synthetic``, so ``zero_w2``
    (W2 = 0) gives the noiseless ``gen_synthetic(..., noise_scale=0)``.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((1, d_x))
    x = rng.uniform(0.0, 1.0, size=(n, d_x))
    eps = rng.standard_normal((n, 1))
    w2 = rng.standard_normal((1, d_x)) / math.sqrt(d_x)
    if zero_w2:
        w2 = np.zeros_like(w2)
    y = x @ w.T + noise_scale * np.abs(x @ w2.T) * eps
    return Dataset(x, y, _names("x", d_x), ("y",),
                   f"synthetic-hetero(n={n},d={d_x},seed={seed})")


def load_csv(path, target_columns: Sequence[str]) -> Dataset:
    """Read a numeric CSV with one header row.

    No quoting, comma separator, '.' decimal point.  Non-target columns
    become features in file order.
    """
    target_columns = list(target_columns)
    if len(set(target_columns)) != len(target_columns):
        raise DataError("target column listed more than once")
    if not target_columns:
        raise DataError("at least one target column is required")
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=",", quoting=csv.QUOTE_NONE)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names in header")
        for t in target_columns:
            if t not in header:
                raise DataError(f"{path}: unknown target column {t!r}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: row {line_no} has {len(row)} fields, expected {len(header)}")
            values = []
            for col, cell in zip(header, row):
                cell = cell.strip()
                if cell == "":
                    raise DataError(f"{path}: missing value at row {line_no}, column {col!r}")
                try:
                    val = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric value {cell!r} at row {line_no}, column {col!r}"
                    ) from None
                if not math.isfinite(val):
                    raise DataError(
                        f"{path}: missing or non-finite value {cell!r} at row {line_no}, "
                        f"column {col!r}")
                values.append(val)
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=np.float64)
    t_idx = [header.index(t) for t in target_columns]
    f_idx = [i for i in range(len(header)) if i not in t_idx]
    return Dataset(table[:, f_idx], table[:, t_idx], tuple(header[i] for i in f_idx),
                   tuple(target_columns), f"csv:{path.name}")


def save_csv(ds: Dataset, path) -> None:
    header = list(ds.feature_names or _names("x", ds.features.shape[1]))
    header += list(ds.target_names or _names("y", ds.targets.shape[1]))
    table = np.hstack([ds.features, ds.targets])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in table:
            writer.writerow([repr(float(v)) for v in row])


def fold_sizes(n: int, ratios: Sequence[float]) -> list:
    """Floor each share, then hand the remainder to earlier folds in order."""
    sizes = [int(math.floor(n * r + 1e-9)) for r in ratios]
    for i in range(n - sum(sizes)):
        sizes[i % len(sizes)] += 1
    return sizes


def split(ds_or_n, ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0) -> FoldSplit:
    n = ds_or_n if isinstance(ds_or_n, (int, np.integer)) else len(ds_or_n)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DataError("need three positive fold ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"fold ratios sum to {sum(ratios)}, not 1")
    sizes = fold_sizes(n, ratios)
    if min(sizes) == 0:
        raise DataError(f"a fold received no samples (sizes {sizes})")
    perm = np.random.default_rng(seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return FoldSplit(perm[:a], perm[a:b], perm[b:], seed)


def fit_standardizer(ds: Dataset, fold: FoldSplit) -> Standardizer:
    if len(fold.train_idx) == 0:
        raise DataError("empty training fold")
    x = ds.features[fold.train_idx]
    y = ds.targets[fold.train_idx]

    def stats(a, names):
        mean = a.mean(axis=0)
        std = a.std(axis=0)
        flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        for i in np.flatnonzero(flat):
            log.warning("column %s has zero variance; left unscaled", names[i] if
                        i < len(names) else i)
        return np.where(flat, 0.0, mean), np.where(flat, 1.0, std)

    xm, xs = stats(x, ds.feature_names)
    ym, ys = stats(y, ds.target_names)
    return Standardizer(xm, xs, ym, ys)


def standardize(ds: Dataset, fold: FoldSplit):
    """z-score features and targets with training-fold statistics.

    Returns (scaled dataset, Standardizer).
    """
    st = fit_standardizer(ds, fold)
    return st.transform(ds), st
