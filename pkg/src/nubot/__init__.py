"""Neural unbalanced transport between weighted point clouds.

The usual workflow touches four layers, re-exported here:

* data: :class:`WeightedPointCloud`, CSV round-trips, batch sampling;
* training: :class:`TrainConfig`, :func:`train`, checkpoints;
* prediction: :func:`push_forward` / :func:`push_backward` and the
  per-point mass factors from :func:`predicted_weights`;
* evaluation: :func:`weighted_mmd` and friends, plus the synthetic
  cluster scenarios in :mod:`nubot.synthgen`.

Lower-level pieces (the discrete solvers in :mod:`nubot.otcore`, the
convex potentials in :mod:`nubot.icnn`, the positive rescaling networks
in :mod:`nubot.rescaler`) stay importable from their own modules.
"""

from .dataset import WeightedPointCloud, load_csv, sample_batch, save_csv, split
from .metrics import (
    cluster_weight_means,
    mass_fraction_correlation,
    identity_baseline,
    observed_baseline,
    weighted_mmd,
)
from .otcore import (
    Coupling,
    SinkhornConfig,
    sinkhorn_balanced,
    sinkhorn_unbalanced,
    squared_cost,
)
from .predictor import (
    predicted_weights,
    push_backward,
    push_forward,
    recover_semicouplings,
    write_predictions,
)
from .synthgen import ScenarioSpec, generate, scenario_spec
from .trainer import (
    NubotModel,
    TrainConfig,
    initialize_model,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Coupling",
    "NubotModel",
    "ScenarioSpec",
    "SinkhornConfig",
    "TrainConfig",
    "WeightedPointCloud",
    "cluster_weight_means",
    "generate",
    "initialize_model",
    "load_checkpoint",
    "load_csv",
    "mass_fraction_correlation",
    "identity_baseline",
    "observed_baseline",
    "predicted_weights",
    "push_backward",
    "push_forward",
    "recover_semicouplings",
    "sample_batch",
    "save_checkpoint",
    "save_csv",
    "scenario_spec",
    "sinkhorn_balanced",
    "sinkhorn_unbalanced",
    "split",
    "squared_cost",
    "train",
    "weighted_mmd",
    "write_predictions",
]
