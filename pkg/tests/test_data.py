import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import spearmanr

from ffcp.data import (
    DataError,
    Dataset,
    fold_sizes,
    gen_synthetic,
    gen_synthetic_hetero,
    load_csv,
    save_csv,
    split,
    standardize,
)


def write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestGenerators:
    def test_deterministic(self):
        a, b = gen_synthetic(50, seed=3), gen_synthetic(50, seed=3)
        assert np.array_equal(a.features, b.features) and np.array_equal(a.targets, b.targets)

    def test_shapes_and_range(self):
        ds = gen_synthetic(200, d_x=100, seed=0)
        assert ds.features.shape == (200, 100) and ds.targets.shape == (200, 1)
        assert ds.features.min() >= 0 and ds.features.max() <= 1

    def test_noiseless_is_linear(self):
        ds = gen_synthetic(300, d_x=10, seed=1, noise_scale=0.0)
        coef, *_ = np.linalg.lstsq(ds.features, ds.targets, rcond=None)
        np.testing.assert_allclose(ds.features @ coef, ds.targets, atol=1e-10)

    def test_hetero_zero_w2_reduces(self):
        a = gen_synthetic_hetero(100, d_x=8, seed=4, zero_w2=True)
        b = gen_synthetic(100, d_x=8, seed=4, noise_scale=0.0)
        assert np.array_equal(a.targets, b.targets)

    def test_hetero_noise_tracks_w2x(self):
        ds = gen_synthetic_hetero(10000, seed=0)
        clean = gen_synthetic_hetero(10000, seed=0, zero_w2=True)
        # replay the generator's draw order to recover W2 X
        rng = np.random.default_rng(0)
        rng.standard_normal((1, 100))
        x = rng.uniform(0.0, 1.0, size=(10000, 100))
        rng.standard_normal((10000, 1))
        w2 = rng.standard_normal((1, 100)) / 10.0
        np.testing.assert_array_equal(x, ds.features)
        rho = spearmanr(np.abs(ds.targets - clean.targets).ravel(), np.abs(x @ w2.T).ravel())
        assert rho[0] > 0.5


class TestCsv:
    def test_basic(self, tmp_path):
        p = write(tmp_path, "a,b,y\n1,2,3\n4,5,6\n7,8,9\n")
        ds = load_csv(p, ["y"])
        assert ds.features.shape == (3, 2) and ds.targets.shape == (3, 1)
        assert ds.feature_names == ("a", "b")

    def test_nan_rejected_with_location(self, tmp_path):
        p = write(tmp_path, "a,y\n1,2\nNaN,3\n")
        with pytest.raises(DataError, match=r"row 3.*'a'"):
            load_csv(p, ["y"])

    def test_missing_value(self, tmp_path):
        p = write(tmp_path, "a,y\n1,\n")
        with pytest.raises(DataError, match="missing value at row 2"):
            load_csv(p, ["y"])

    def test_non_numeric(self, tmp_path):
        p = write(tmp_path, "a,y\nfoo,1\n")
        with pytest.raises(DataError, match="non-numeric"):
            load_csv(p, ["y"])

    def test_unknown_and_duplicate_targets(self, tmp_path):
        p = write(tmp_path, "a,y\n1,2\n")
        with pytest.raises(DataError):
            load_csv(p, ["z"])
        with pytest.raises(DataError):
            load_csv(p, ["y", "y"])

    def test_round_trip(self, tmp_path):
        ds = gen_synthetic(20, d_x=3, seed=0)
        save_csv(ds, tmp_path / "o.csv")
        back = load_csv(tmp_path / "o.csv", ["y"])
        assert np.array_equal(back.features, ds.features)
        assert np.array_equal(back.targets, ds.targets)


class TestSplit:
    def test_hand_sizes(self):
        assert fold_sizes(10, (0.5, 0.3, 0.2)) == [5, 3, 2]

    @given(n=st.integers(4, 5000), seed=st.integers(0, 100))
    def test_partition(self, n, seed):
        f = split(n, (0.5, 0.25, 0.25), seed)
        joined = np.concatenate([f.train_idx, f.cal_idx, f.test_idx])
        assert sorted(joined.tolist()) == list(range(n))

    def test_same_seed_same_split(self):
        a, b = split(100, seed=5), split(100, seed=5)
        assert np.array_equal(a.test_idx, b.test_idx)

    @pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.5, 0.3, 0.3), (1.0, 0.0, 0.0)])
    def test_bad_ratios(self, ratios):
        with pytest.raises(DataError):
            split(100, ratios)

    def test_empty_fold(self):
        with pytest.raises(DataError):
            split(2, (0.5, 0.25, 0.25))


class TestStandardize:
    def test_train_means_zero(self):
        ds = gen_synthetic(400, d_x=6, seed=0)
        f = split(ds, seed=0)
        scaled, _ = standardize(ds, f)
        np.testing.assert_allclose(scaled.features[f.train_idx].mean(axis=0), 0, atol=1e-12)

    def test_constant_column_unchanged(self, caplog):
        x = np.column_stack([np.full(40, 3.0), np.arange(40.0)])
        ds = Dataset(x, np.arange(40.0)[:, None], ("c", "v"), ("y",))
        with caplog.at_level(logging.WARNING):
            scaled, st_ = standardize(ds, split(ds, seed=0))
        assert np.array_equal(scaled.features[:, 0], x[:, 0])
        assert "zero variance" in caplog.text

    def test_inverse(self):
        ds = gen_synthetic(100, d_x=4, seed=2)
        scaled, st_ = standardize(ds, split(ds, seed=0))
        np.testing.assert_allclose(st_.inverse(scaled).targets, ds.targets)
        np.testing.assert_allclose(st_.targets_to_original(scaled.targets), ds.targets)
