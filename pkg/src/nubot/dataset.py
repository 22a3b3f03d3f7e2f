"""Weighted point clouds: loading, splitting, and batch sampling.

A weighted point cloud is the discrete measure sum_i m_i * delta(x_i): rows of
``points`` are the particle positions, ``masses`` their nonnegative weights.
Clouds may optionally carry integer cluster labels, used by the evaluation
metrics and the synthetic benchmark.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "WeightedPointCloud",
    "SplitSpec",
    "load_csv",
    "split",
    "sample_batch",
]


@dataclass(frozen=True)
class WeightedPointCloud:
    """Discrete measure with optional per-point cluster labels."""

    points: np.ndarray  # (n, d) float64
    masses: np.ndarray  # (n,) float64, nonnegative
    labels: np.ndarray | None = None  # (n,) int64 or None

    def __post_init__(self):
        points = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if points.ndim != 2 or points.shape[0] == 0 or points.shape[1] == 0:
            raise ValueError("points must be a non-empty (n, d) array")
        masses = np.ascontiguousarray(np.asarray(self.masses, dtype=np.float64))
        if masses.shape != (points.shape[0],):
            raise ValueError("masses must be a vector with one entry per point")
        if not np.all(np.isfinite(points)):
            raise ValueError("points contain non-finite values")
        if not np.all(np.isfinite(masses)) or np.any(masses < 0.0):
            raise ValueError("masses must be finite and nonnegative")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "masses", masses)
        if self.labels is not None:
            labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
            if labels.shape != (points.shape[0],):
                raise ValueError("labels must be a vector with one entry per point")
            object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def total_mass(self) -> float:
        return float(np.sum(self.masses))

    def subset(self, indices: np.ndarray) -> "WeightedPointCloud":
        indices = np.asarray(indices, dtype=np.int64)
        labels = self.labels[indices] if self.labels is not None else None
        return WeightedPointCloud(self.points[indices], self.masses[indices], labels)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.train_fraction <= 1.0):
            raise ValueError("train_fraction must lie in (0, 1]")


def load_csv(
    path: str | Path,
    weight_column: str | None = None,
    label_column: str | None = None,
    normalize: bool = False,
) -> WeightedPointCloud:
    """Read a cloud from a headered CSV file.

    Every column that is not the weight or label column is taken as a feature.
    Missing weight column means unit mass per point.  With ``normalize=True``
    each feature column is divided by its 75th percentile and passed through
    log1p, the preprocessing used for raw count data; it errors when a
    percentile is not strictly positive.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: no data rows")

    header = [h.strip() for h in header]
    for name in (weight_column, label_column):
        if name is not None and name not in header:
            raise ValueError(f"{path}: column {name!r} not found in header {header}")
    feature_names = [h for h in header if h not in (weight_column, label_column)]
    if not feature_names:
        raise ValueError(f"{path}: no feature columns left")

    table = np.asarray(rows, dtype=object)
    index = {name: i for i, name in enumerate(header)}
    points = np.asarray(
        table[:, [index[name] for name in feature_names]], dtype=np.float64
    )

    if weight_column is not None:
        masses = np.asarray(table[:, index[weight_column]], dtype=np.float64)
        if np.any(masses < 0.0):
            raise ValueError(f"{path}: negative weight")
    else:
        masses = np.ones(points.shape[0])

    labels = None
    if label_column is not None:
        labels = np.asarray(
            np.asarray(table[:, index[label_column]], dtype=np.float64),
            dtype=np.int64,
        )

    if normalize:
        scale = np.percentile(points, 75, axis=0)
        if np.any(scale <= 0.0):
            raise ValueError(
                f"{path}: normalization needs strictly positive 75th percentiles"
            )
        points = np.log1p(points / scale)

    return WeightedPointCloud(points, masses, labels)


def save_csv(cloud: WeightedPointCloud, path: str | Path) -> None:
    """Write a cloud in the format :func:`load_csv` reads back.

    Columns are ``x0..x{d-1}``, ``weight``, and ``label`` when present.
    """
    path = Path(path)
    header = [f"x{i}" for i in range(cloud.dim)] + ["weight"]
    if cloud.labels is not None:
        header.append("label")
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(cloud.size):
            row = [repr(float(v)) for v in cloud.points[i]] + [
                repr(float(cloud.masses[i]))
            ]
            if cloud.labels is not None:
                row.append(str(int(cloud.labels[i])))
            writer.writerow(row)


def split(cloud: WeightedPointCloud, spec: SplitSpec) -> tuple[WeightedPointCloud, WeightedPointCloud | None]:
    """Disjoint train/test split by seeded permutation.

    The two parts partition the input exactly; a train fraction of 1.0 yields
    ``None`` for the test part.
    """
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(cloud.size)
    n_train = int(round(spec.train_fraction * cloud.size))
    n_train = min(max(n_train, 1), cloud.size)
    train = cloud.subset(perm[:n_train])
    if n_train == cloud.size:
        return train, None
    return train, cloud.subset(perm[n_train:])


def sample_batch(
    cloud: WeightedPointCloud,
    size: int,
    seed: int,
    step: int,
    replace: bool = True,
) -> WeightedPointCloud:
    """Draw a batch with uniform masses 1/size.

    Batches are deterministic in ``(seed, step)`` so any training step can be
    replayed exactly.  Sampling is with replacement by default; the
    without-replacement mode exists for determinism tests and requires
    ``size <= cloud.size``.
    """
    if size <= 0:
        raise ValueError("batch size must be positive")
    if not replace and size > cloud.size:
        raise ValueError("cannot sample more points than available without replacement")
    rng = np.random.default_rng([seed, step])
    if replace:
        indices = rng.integers(0, cloud.size, size=size)
    else:
        indices = rng.choice(cloud.size, size=size, replace=False)
    batch = cloud.subset(indices)
    return WeightedPointCloud(batch.points, np.full(size, 1.0 / size), batch.labels)
