"""Two-dimensional mixture benchmarks with prescribed cluster proportions.

Three named scenarios share one geometry — three well-separated Gaussian
clusters, with every target cluster translated by a constant intervention
shift — and differ only in how much probability mass each cluster carries
before and after.  A method that models mass change should recover the
per-cluster ratios ``target_prop / source_prop``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import WeightedPointCloud

__all__ = ["ScenarioSpec", "scenario_spec", "generate", "SCENARIO_IDS"]

SCENARIO_IDS = ("a", "b", "c")

_CLUSTER_MEANS = ((0.0, 0.0), (8.0, 0.0), (4.0, 7.0))
_CLUSTER_STD = 0.7
_SHIFT = (0.0, -3.0)
_THIRD = 1.0 / 3.0
_PROPORTIONS = {
    "a": ((_THIRD, _THIRD, _THIRD), (0.45, 0.45, 0.10)),
    "b": ((_THIRD, _THIRD, _THIRD), (0.70, 0.20, 0.10)),
    "c": ((0.45, 0.45, 0.10), (0.10, 0.45, 0.45)),
}


@dataclass(frozen=True)
class ScenarioSpec:
    """Full description of one benchmark draw."""

    id: str
    source_props: tuple[float, float, float]
    target_props: tuple[float, float, float]
    n: int = 400
    cluster_means: tuple[tuple[float, float], ...] = _CLUSTER_MEANS
    cluster_std: float = _CLUSTER_STD
    shift: tuple[float, float] = _SHIFT
    seed: int = 0

    def __post_init__(self):
        if self.id not in SCENARIO_IDS:
            raise ValueError(f"unknown scenario id {self.id!r}")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.cluster_std <= 0.0:
            raise ValueError("cluster_std must be positive")
        for name in ("source_props", "target_props"):
            props = np.asarray(getattr(self, name), dtype=np.float64)
            if props.shape != (3,) or np.any(props < 0.0):
                raise ValueError(f"{name} must be three nonnegative values")
            if abs(props.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must sum to one")
        if len(self.cluster_means) != 3:
            raise ValueError("exactly three cluster means are required")

    def scaling_factors(self) -> np.ndarray:
        """Per-cluster mass ratios the trained model should predict."""
        return np.asarray(self.target_props) / np.asarray(self.source_props)


def scenario_spec(scenario_id: str, n: int = 400, seed: int = 0) -> ScenarioSpec:
    """The named benchmark scenario with its standard proportions."""
    if scenario_id not in _PROPORTIONS:
        raise ValueError(f"unknown scenario id {scenario_id!r}")
    source_props, target_props = _PROPORTIONS[scenario_id]
    return ScenarioSpec(
        id=scenario_id,
        source_props=source_props,
        target_props=target_props,
        n=n,
        seed=seed,
    )


def _draw_cloud(
    rng: np.random.Generator,
    props: np.ndarray,
    means: np.ndarray,
    std: float,
    n: int,
) -> WeightedPointCloud:
    labels = rng.choice(3, size=n, p=props)
    points = means[labels] + rng.normal(0.0, std, size=(n, 2))
    return WeightedPointCloud(
        points=points, masses=np.full(n, 1.0 / n), labels=labels
    )


def generate(spec: ScenarioSpec) -> tuple[WeightedPointCloud, WeightedPointCloud]:
    """One (source, target) draw: cluster picked per point, uniform masses.

    Source points come from the configured clusters with the source
    proportions; target points from the shifted clusters with the target
    proportions.  Labels record the generating cluster.
    """
    rng = np.random.default_rng([spec.seed, ord(spec.id)])
    means = np.asarray(spec.cluster_means, dtype=np.float64)
    shift = np.asarray(spec.shift, dtype=np.float64)
    source = _draw_cloud(
        rng, np.asarray(spec.source_props, dtype=np.float64), means, spec.cluster_std, spec.n
    )
    target = _draw_cloud(
        rng, np.asarray(spec.target_props, dtype=np.float64), means + shift, spec.cluster_std, spec.n
    )
    return source, target
