"""Evaluation metrics for weighted point-cloud predictions.

Distribution distance is a mass-weighted maximum mean discrepancy with a
Gaussian kernel family: the squared discrepancy is computed for every
bandwidth parameter in the family and the results are averaged.  Weights
are normalized to probability vectors first, so only relative masses
matter; the small negative values floating-point cancellation can produce
are clipped to zero.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from .dataset import WeightedPointCloud

__all__ = [
    "DEFAULT_KERNEL_SCALES",
    "weighted_mmd",
    "cluster_weight_means",
    "mass_fraction_correlation",
    "identity_baseline",
    "observed_baseline",
]

DEFAULT_KERNEL_SCALES = (2.0, 1.0, 0.5, 0.1, 0.01, 0.005)


def weighted_mmd(
    p: WeightedPointCloud,
    q: WeightedPointCloud,
    scales: tuple[float, ...] = DEFAULT_KERNEL_SCALES,
) -> float:
    """Average squared discrepancy over the kernel family, clipped at zero.

    Uses the biased (V-statistic) estimator, which keeps the value exactly
    zero when both clouds coincide point for point and weight for weight.
    """
    if p.dim != q.dim:
        raise ValueError("clouds must share a dimension")
    if not scales:
        raise ValueError("at least one kernel scale is required")
    if p.total_mass() <= 0.0 or q.total_mass() <= 0.0:
        raise ValueError("clouds must carry positive total mass")
    a = p.masses / p.masses.sum()
    b = q.masses / q.masses.sum()
    dxx = cdist(p.points, p.points, "sqeuclidean")
    dyy = cdist(q.points, q.points, "sqeuclidean")
    dxy = cdist(p.points, q.points, "sqeuclidean")
    total = 0.0
    for gamma in scales:
        if gamma <= 0.0:
            raise ValueError("kernel scales must be positive")
        term = (
            a @ np.exp(-gamma * dxx) @ a
            + b @ np.exp(-gamma * dyy) @ b
            - 2.0 * (a @ np.exp(-gamma * dxy) @ b)
        )
        total += term
    return max(float(total / len(scales)), 0.0)


def cluster_weight_means(
    points: np.ndarray, weights: np.ndarray, labels: np.ndarray
) -> dict[int, float]:
    """Mean predicted weight per cluster label."""
    points = np.asarray(points, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    labels = np.asarray(labels)
    if weights.shape != labels.shape or points.shape[0] != weights.shape[0]:
        raise ValueError("points, weights, and labels must align")
    return {
        int(label): float(weights[labels == label].mean())
        for label in np.unique(labels)
    }


def mass_fraction_correlation(predicted: np.ndarray, observed: np.ndarray) -> float:
    """Pearson correlation between predicted and observed mass fractions."""
    predicted = np.asarray(predicted, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if predicted.size != observed.size or predicted.size < 2:
        raise ValueError("need at least two matching fractions")
    return float(np.corrcoef(predicted, observed)[0, 1])


def identity_baseline(control: WeightedPointCloud) -> WeightedPointCloud:
    """Do-nothing prediction: the control points unchanged, uniform weights."""
    return WeightedPointCloud(
        points=control.points.copy(),
        masses=np.full(control.size, 1.0 / control.size),
        labels=None if control.labels is None else control.labels.copy(),
    )


def observed_baseline(target: WeightedPointCloud, seed: int = 0) -> WeightedPointCloud:
    """Oracle prediction: a random permutation of the target, uniform weights.

    Its discrepancy against the target it permutes is zero up to round-off,
    which makes it the lower anchor any trained model is measured against;
    the permutation is deterministic per seed.
    """
    order = np.random.default_rng(seed).permutation(target.size)
    return WeightedPointCloud(
        points=target.points[order].copy(),
        masses=np.full(target.size, 1.0 / target.size),
        labels=None if target.labels is None else target.labels[order].copy(),
    )
