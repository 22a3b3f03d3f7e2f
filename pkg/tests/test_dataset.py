"""Tests for the weighted point-cloud container and its I/O helpers."""

import numpy as np
import pytest

from nubot.dataset import (
    SplitSpec,
    WeightedPointCloud,
    load_csv,
    sample_batch,
    save_csv,
    split,
)


def make_cloud(n=10, d=2, seed=0, with_labels=False):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=n) if with_labels else None
    return WeightedPointCloud(
        points=rng.normal(size=(n, d)),
        masses=rng.uniform(0.5, 1.5, size=n),
        labels=labels,
    )


class TestWeightedPointCloud:
    def test_basic_properties(self):
        cloud = make_cloud(n=7, d=3)
        assert cloud.size == 7
        assert cloud.dim == 3
        assert cloud.total_mass() == pytest.approx(cloud.masses.sum())

    def test_zero_mass_allowed(self):
        cloud = WeightedPointCloud(np.zeros((2, 1)), np.array([0.0, 1.0]))
        assert cloud.total_mass() == 1.0

    def test_negative_mass_rejected(self):
        with pytest.raises(ValueError):
            WeightedPointCloud(np.zeros((2, 1)), np.array([1.0, -0.5]))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            WeightedPointCloud(np.array([[np.inf, 0.0]]), np.array([1.0]))
        with pytest.raises(ValueError):
            WeightedPointCloud(np.zeros((1, 2)), np.array([np.nan]))

    def test_shape_mismatches_rejected(self):
        with pytest.raises(ValueError):
            WeightedPointCloud(np.zeros((3, 2)), np.ones(2))
        with pytest.raises(ValueError):
            WeightedPointCloud(np.zeros(3), np.ones(3))
        with pytest.raises(ValueError):
            WeightedPointCloud(np.zeros((3, 2)), np.ones(3), labels=np.arange(2))

    def test_subset_keeps_labels_aligned(self):
        cloud = make_cloud(n=10, with_labels=True)
        sub = cloud.subset(np.array([4, 1, 7]))
        assert sub.size == 3
        np.testing.assert_array_equal(sub.labels, cloud.labels[[4, 1, 7]])
        np.testing.assert_allclose(sub.points, cloud.points[[4, 1, 7]])


class TestLoadCsv:
    def test_default_unit_masses(self, tmp_path):
        path = tmp_path / "plain.csv"
        path.write_text("f0,f1\n0.0,1.0\n2.0,3.0\n4.0,5.0\n")
        cloud = load_csv(path)
        assert cloud.size == 3 and cloud.dim == 2
        np.testing.assert_array_equal(cloud.masses, np.ones(3))

    def test_weight_column_passthrough(self, tmp_path):
        path = tmp_path / "weighted.csv"
        path.write_text("f0,weight\n1.0,0.5\n2.0,2.0\n")
        cloud = load_csv(path, weight_column="weight")
        np.testing.assert_array_equal(cloud.masses, [0.5, 2.0])
        assert cloud.dim == 1

    def test_negative_weight_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("f0,weight\n1.0,-1.0\n")
        with pytest.raises(ValueError, match="negative weight"):
            load_csv(path, weight_column="weight")

    def test_label_column(self, tmp_path):
        path = tmp_path / "labeled.csv"
        path.write_text("f0,f1,weight,label\n0,0,1,2\n1,1,1,0\n")
        cloud = load_csv(path, weight_column="weight", label_column="label")
        np.testing.assert_array_equal(cloud.labels, [2, 0])

    def test_missing_column_rejected(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("f0\n1.0\n")
        with pytest.raises(ValueError, match="not found"):
            load_csv(path, weight_column="weight")

    def test_non_numeric_cell_rejected(self, tmp_path):
        path = tmp_path / "text.csv"
        path.write_text("f0,f1\n1.0,banana\n")
        with pytest.raises(ValueError):
            load_csv(path)

    def test_normalize_uses_upper_quartile_then_log1p(self, tmp_path):
        path = tmp_path / "counts.csv"
        rng = np.random.default_rng(11)
        values = rng.uniform(1.0, 100.0, size=(50, 2))
        lines = ["a,b"] + [f"{r[0]},{r[1]}" for r in values]
        path.write_text("\n".join(lines) + "\n")
        cloud = load_csv(path, normalize=True)
        scale = np.percentile(values, 75, axis=0)
        np.testing.assert_allclose(cloud.points, np.log1p(values / scale))

    def test_roundtrip_is_bit_exact(self, tmp_path):
        cloud = make_cloud(n=20, d=3, seed=5, with_labels=True)
        path = tmp_path / "cloud.csv"
        save_csv(cloud, path)
        back = load_csv(path, weight_column="weight", label_column="label")
        np.testing.assert_array_equal(back.points, cloud.points)
        np.testing.assert_array_equal(back.masses, cloud.masses)
        np.testing.assert_array_equal(back.labels, cloud.labels)


class TestSplit:
    def test_sizes(self):
        cloud = make_cloud(n=10)
        train, test = split(cloud, SplitSpec(train_fraction=0.8, seed=7))
        assert train.size == 8
        assert test.size == 2

    def test_partition_recovers_cloud(self):
        cloud = make_cloud(n=23, with_labels=True)
        train, test = split(cloud, SplitSpec(train_fraction=0.6, seed=3))
        merged = np.concatenate([train.points, test.points])
        # Same multiset of rows, any order.
        original = cloud.points[np.lexsort(cloud.points.T)]
        recovered = merged[np.lexsort(merged.T)]
        np.testing.assert_array_equal(original, recovered)

    def test_full_fraction_degenerates(self):
        cloud = make_cloud(n=5)
        train, test = split(cloud, SplitSpec(train_fraction=1.0, seed=0))
        assert train.size == 5
        assert test is None

    def test_deterministic(self):
        cloud = make_cloud(n=40)
        first = split(cloud, SplitSpec(train_fraction=0.8, seed=9))
        second = split(cloud, SplitSpec(train_fraction=0.8, seed=9))
        np.testing.assert_array_equal(first[0].points, second[0].points)
        np.testing.assert_array_equal(first[1].points, second[1].points)

    def test_bad_fraction_rejected(self):
        with pytest.raises(ValueError):
            SplitSpec(train_fraction=0.0)
        with pytest.raises(ValueError):
            SplitSpec(train_fraction=1.5)


class TestSampleBatch:
    def test_uniform_masses(self):
        cloud = make_cloud(n=50)
        batch = sample_batch(cloud, 400, seed=1, step=0)
        assert batch.size == 400
        np.testing.assert_allclose(batch.masses, np.full(400, 1 / 400))
        assert batch.masses.sum() == pytest.approx(1.0, abs=1e-12)

    def test_replay_is_identical(self):
        cloud = make_cloud(n=30)
        a = sample_batch(cloud, 16, seed=5, step=12)
        b = sample_batch(cloud, 16, seed=5, step=12)
        np.testing.assert_array_equal(a.points, b.points)

    def test_step_changes_batch(self):
        cloud = make_cloud(n=30)
        a = sample_batch(cloud, 16, seed=5, step=0)
        b = sample_batch(cloud, 16, seed=5, step=1)
        assert not np.array_equal(a.points, b.points)

    def test_without_replacement_full_size_is_permutation(self):
        cloud = make_cloud(n=12)
        batch = sample_batch(cloud, 12, seed=2, step=0, replace=False)
        original = cloud.points[np.lexsort(cloud.points.T)]
        drawn = batch.points[np.lexsort(batch.points.T)]
        np.testing.assert_array_equal(original, drawn)

    def test_zero_size_rejected(self):
        cloud = make_cloud()
        with pytest.raises(ValueError):
            sample_batch(cloud, 0, seed=0, step=0)

    def test_labels_carried(self):
        cloud = make_cloud(n=25, with_labels=True)
        batch = sample_batch(cloud, 8, seed=3, step=4)
        assert batch.labels is not None
        assert batch.labels.shape == (8,)
