"""Applying a trained model to weighted point clouds.

The forward direction moves points through the gradient of ``g`` and
multiplies each mass by the predicted growth factor ``eta(x) / zeta(grad
g(x))``; the backward direction mirrors this through ``f``.  The module
also reconstructs the pair of semi-couplings a training step implies and
checks their marginal identities.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import icnn, rescaler
from .dataset import WeightedPointCloud
from .otcore import Coupling
from .trainer import NubotModel

__all__ = [
    "push_forward",
    "push_backward",
    "predicted_weights",
    "SemiCouplingPair",
    "recover_semicouplings",
    "semicoupling_marginal_errors",
    "write_predictions",
]


def predicted_weights(model: NubotModel, points: np.ndarray) -> np.ndarray:
    """Growth factor ``eta(x) / zeta(grad g(x))`` at each input point."""
    points = np.asarray(points, dtype=np.float64)
    mapped = icnn.gradient_map(model.g, points)
    return rescaler.evaluate_weights(model.eta, points) / rescaler.evaluate_weights(
        model.zeta, mapped
    )


def push_forward(model: NubotModel, cloud: WeightedPointCloud) -> WeightedPointCloud:
    """Transport a source cloud: move every point, rescale every mass."""
    mapped = icnn.gradient_map(model.g, cloud.points)
    factor = rescaler.evaluate_weights(model.eta, cloud.points) / rescaler.evaluate_weights(
        model.zeta, mapped
    )
    return WeightedPointCloud(
        points=mapped, masses=cloud.masses * factor, labels=cloud.labels
    )


def push_backward(model: NubotModel, cloud: WeightedPointCloud) -> WeightedPointCloud:
    """Transport a target cloud back: the mirror of :func:`push_forward`."""
    mapped = icnn.gradient_map(model.f, cloud.points)
    factor = rescaler.evaluate_weights(model.zeta, cloud.points) / rescaler.evaluate_weights(
        model.eta, mapped
    )
    return WeightedPointCloud(
        points=mapped, masses=cloud.masses * factor, labels=cloud.labels
    )


@dataclass(frozen=True)
class SemiCouplingPair:
    """The two plans implied by one training step.

    ``first`` moves source mass (its rows, once rescaled to the batch mass,
    reproduce the source marginal exactly); ``second`` receives target mass
    (its columns reproduce the target marginal).  Both are source-by-target
    matrices.
    """

    first: np.ndarray
    second: np.ndarray

    def __post_init__(self):
        first = np.ascontiguousarray(np.asarray(self.first, dtype=np.float64))
        second = np.ascontiguousarray(np.asarray(self.second, dtype=np.float64))
        if first.ndim != 2 or first.shape != second.shape:
            raise ValueError("semi-couplings must be two matrices of equal shape")
        object.__setattr__(self, "first", first)
        object.__setattr__(self, "second", second)


def recover_semicouplings(
    gamma1: Coupling, gamma2: Coupling, e: np.ndarray, z: np.ndarray
) -> SemiCouplingPair:
    """Undo the per-point factors: divide each plan's rows by its factor.

    ``gamma1`` couples mapped source to target (rows indexed by source),
    ``gamma2`` couples mapped target to source (rows indexed by target, so
    its quotient is transposed to source-by-target orientation).  With unit
    factors the pair is exactly ``(gamma1.plan, gamma2.plan.T)``.
    """
    e = np.asarray(e, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if e.ndim != 1 or z.ndim != 1:
        raise ValueError("factors must be one-dimensional")
    if np.any(e <= 0.0) or np.any(z <= 0.0):
        raise ValueError("factors must be strictly positive to invert")
    if gamma1.plan.shape[0] != e.size or gamma2.plan.shape[0] != z.size:
        raise ValueError("factor lengths must match the plans' row counts")
    if gamma1.plan.shape != gamma2.plan.T.shape:
        raise ValueError("plans must have transposed shapes")
    return SemiCouplingPair(
        first=gamma1.plan / e[:, None], second=(gamma2.plan / z[:, None]).T
    )


def semicoupling_marginal_errors(
    pair: SemiCouplingPair, source_masses: np.ndarray, target_masses: np.ndarray
) -> tuple[float, float]:
    """Max deviation of each plan's own marginal from the batch masses.

    Each plan is first rescaled so its total matches the corresponding batch
    total; the first plan is then compared along rows against the source
    masses, the second along columns against the target masses.
    """
    source_masses = np.asarray(source_masses, dtype=np.float64)
    target_masses = np.asarray(target_masses, dtype=np.float64)
    first_total = pair.first.sum()
    second_total = pair.second.sum()
    if first_total <= 0.0 or second_total <= 0.0:
        raise ValueError("semi-couplings must carry positive mass")
    rows = pair.first.sum(axis=1) * (source_masses.sum() / first_total)
    cols = pair.second.sum(axis=0) * (target_masses.sum() / second_total)
    return (
        float(np.max(np.abs(rows - source_masses))),
        float(np.max(np.abs(cols - target_masses))),
    )


def write_predictions(
    path: str | Path, source: WeightedPointCloud, pushed: WeightedPointCloud
) -> None:
    """CSV with input coordinates, mapped coordinates, and both masses."""
    if source.size != pushed.size or source.dim != pushed.dim:
        raise ValueError("source and pushed clouds must align point for point")
    d = source.dim
    header = (
        [f"x{i}" for i in range(d)]
        + [f"y{i}" for i in range(d)]
        + ["input_mass", "output_mass"]
    )
    if source.labels is not None:
        header.append("label")
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for i in range(source.size):
            row = [repr(float(v)) for v in source.points[i]]
            row += [repr(float(v)) for v in pushed.points[i]]
            row += [repr(float(source.masses[i])), repr(float(pushed.masses[i]))]
            if source.labels is not None:
                row.append(str(int(source.labels[i])))
            writer.writerow(row)
