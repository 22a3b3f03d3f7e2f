"""Alternating training of transport potentials and rescaling networks.

Each step of the full method:

1. maps the source batch forward through ``grad g`` and the target batch
   backward through ``grad f``;
2. solves two unbalanced transport problems — mapped source against target,
   and mapped target against source — and turns their row marginals into
   per-point factors ``e`` (source side) and ``z`` (target side), each
   normalized to mean one; the rescaling networks regress toward these, and
   the potentials' objective is weighted by the networks' current smooth
   estimates ``eta(x)`` and ``zeta(y)`` rather than the raw factors;
3. updates the potentials in sequence: one optimizer step on g descending

       mean_i e_i * [f(grad g(x_i)) - <x_i, grad g(x_i)>]

   plus g's convexity penalty, then — against the freshly updated map —
   one step on f ascending

       mean_i e_i * f(grad g(x_i)) - mean_j z_j * f(y_j)
       - cycle_weight * mean_i |grad f(grad g(x_i)) - x_i|^2

   with f's ``Wz`` weights clamped to nonnegative right after its update;
4. regresses the rescaling networks one step toward ``e`` and ``z``.

The potentials play a minimax game that is linear in f, and simultaneous
descent-ascent on such games spirals away from the saddle point instead of
settling into it.  Updating sequentially — f always reacts to the map g
just produced — keeps the pair anchored.

Weighting the game by ``eta``/``zeta`` instead of the raw ``e``/``z`` is
equally deliberate.  A single batch's factors are exact row marginals of
that batch's transport plans, and early in training — while ``grad f`` is
still a poor backward map — they concentrate their entire sum on a few
points.  Feeding those spikes straight into the objective hands f updates
hundreds of times larger than the balanced case at a few locations, which
degrades ``grad f`` further and makes the next batch's factors spikier
still; the loop reliably diverges.  The regression networks average the
same signal over many batches and locations, so the cluster-level mass
structure reaches the potentials while single-batch spikes do not.  At
convergence ``eta(x_i) = e_i`` and ``zeta(y_j) = z_j`` on the data, so the
two weightings agree exactly where it matters.

The cycle term in f's loss anchors the pair's defining identity.  At the
saddle point f is the convex conjugate of g, so ``grad f`` inverts
``grad g`` exactly and the term vanishes — it does not move the solution.
Away from the saddle it is load-bearing: every step feeds ``grad f`` of the
target batch into a transport solve, but the minimax alone only shapes f's
values, leaving its gradient map to drift arbitrarily far from the inverse
it is assumed to approximate.  Measured without the anchor, that drift
grows monotonically from the first steps until the solves degenerate and
training diverges; penalizing the inversion residual on mapped source
points pins ``grad f`` across exactly the region where the solver queries
it.

The reported per-step objective

    J = mean_i eta(x_i) * [f(grad g(x_i)) - <x_i, grad g(x_i)>]
      - mean_j zeta(y_j) * f(y_j)

is evaluated at the start of the step, before any network moves.

The ablation mode skips the transport solves entirely and fixes
``e = z = 1``, recovering the balanced neural-transport trainer; nothing
else changes.  Both factors enter the objective as constants: gradients
never flow through the transport solver or into the rescalers from J.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import icnn, rescaler
from .dataset import WeightedPointCloud, sample_batch
from .diffengine import OptimizerState, adam_step, grad_scalar
from .otcore import SinkhornConfig, sinkhorn_unbalanced, squared_cost, weights_from_coupling

__all__ = [
    "TrainConfig",
    "NubotModel",
    "StepDiagnostics",
    "initialize_model",
    "nubot_step",
    "cellot_step",
    "train",
    "dual_objective_value",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    epsilon: float = 0.005
    tau: float = 0.05
    lr_potentials: float = 1e-4
    lr_rescalers: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.9
    batch_source: int = 400
    batch_target: int = 400
    steps: int = 10000
    lambda_penalty: float = 1.0
    cycle_weight: float = 1.0
    mode: str = "nubot"
    seed: int = 0
    icnn_hidden: tuple[int, ...] = (64, 64, 64, 64)
    rescaler_hidden: tuple[int, ...] = (32, 32)
    activation: str = "rectifier"
    sinkhorn_tolerance: float = 1e-6
    sinkhorn_max_iterations: int = 2000

    def __post_init__(self):
        if self.mode not in ("nubot", "cellot"):
            raise ValueError("mode must be 'nubot' or 'cellot'")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if min(self.batch_source, self.batch_target) < 1:
            raise ValueError("batch sizes must be positive")
        if self.lambda_penalty < 0.0:
            raise ValueError("lambda_penalty must be nonnegative")
        if self.cycle_weight < 0.0:
            raise ValueError("cycle_weight must be nonnegative")
        for name in ("epsilon", "tau", "lr_potentials", "lr_rescalers"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        object.__setattr__(self, "icnn_hidden", tuple(int(h) for h in self.icnn_hidden))
        object.__setattr__(
            self, "rescaler_hidden", tuple(int(h) for h in self.rescaler_hidden)
        )

    def sinkhorn_config(self) -> SinkhornConfig:
        return SinkhornConfig(
            epsilon=self.epsilon,
            tau1=self.tau,
            tau2=self.tau,
            tolerance=self.sinkhorn_tolerance,
            max_iterations=self.sinkhorn_max_iterations,
        )

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "tau": self.tau,
            "lr_potentials": self.lr_potentials,
            "lr_rescalers": self.lr_rescalers,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "batch_source": self.batch_source,
            "batch_target": self.batch_target,
            "steps": self.steps,
            "lambda_penalty": self.lambda_penalty,
            "cycle_weight": self.cycle_weight,
            "mode": self.mode,
            "seed": self.seed,
            "icnn_hidden": list(self.icnn_hidden),
            "rescaler_hidden": list(self.rescaler_hidden),
            "activation": self.activation,
            "sinkhorn_tolerance": self.sinkhorn_tolerance,
            "sinkhorn_max_iterations": self.sinkhorn_max_iterations,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        for key in ("icnn_hidden", "rescaler_hidden"):
            if key in data:
                data[key] = tuple(int(h) for h in data[key])
        return cls(**data)


@dataclass
class StepDiagnostics:
    """Per-step scalars for the diagnostics stream.

    ``j_value`` is the minimax objective without the convexity penalty.  The
    transport masses and rescaler losses are ``None`` in ablation mode, where
    no transport problems are solved and the rescalers stay untouched.
    Summaries are (min, mean, max) of the respective factor vector.
    """

    step: int
    j_value: float
    eta_loss: float | None
    zeta_loss: float | None
    gamma1_mass: float | None
    gamma2_mass: float | None
    e_summary: tuple[float, float, float]
    z_summary: tuple[float, float, float]

    def to_json_dict(self) -> dict:
        def summary(values):
            return {"min": values[0], "mean": values[1], "max": values[2]}

        return {
            "step": self.step,
            "j_value": self.j_value,
            "eta_loss": self.eta_loss,
            "zeta_loss": self.zeta_loss,
            "gamma1_mass": self.gamma1_mass,
            "gamma2_mass": self.gamma2_mass,
            "e_summary": summary(self.e_summary),
            "z_summary": summary(self.z_summary),
        }


@dataclass
class NubotModel:
    """Both potentials, both rescalers, and everything needed to resume."""

    f: icnn.IcnnPotential
    g: icnn.IcnnPotential
    eta: rescaler.RescalerNet
    zeta: rescaler.RescalerNet
    config: TrainConfig
    step: int = 0
    opt_f: OptimizerState | None = None
    opt_g: OptimizerState | None = None
    opt_eta: OptimizerState | None = None
    opt_zeta: OptimizerState | None = None


def initialize_model(config: TrainConfig, dim: int) -> NubotModel:
    """Fresh model at step zero: identity maps, convex potentials."""
    f = icnn.init_identity(
        dim,
        hidden=config.icnn_hidden,
        seed=[config.seed, 11],
        activation=config.activation,
        enforcement="clamp",
    )
    g = icnn.init_identity(
        dim,
        hidden=config.icnn_hidden,
        seed=[config.seed, 12],
        activation=config.activation,
        enforcement="penalty",
    )
    eta = rescaler.init_rescaler(
        dim,
        hidden=config.rescaler_hidden,
        seed=[config.seed, 13],
        activation=config.activation,
    )
    zeta = rescaler.init_rescaler(
        dim,
        hidden=config.rescaler_hidden,
        seed=[config.seed, 14],
        activation=config.activation,
    )
    model = NubotModel(f=f, g=g, eta=eta, zeta=zeta, config=config)
    model.opt_f = OptimizerState.for_block(
        icnn.parameter_block(f), config.lr_potentials, config.beta1, config.beta2
    )
    model.opt_g = OptimizerState.for_block(
        icnn.parameter_block(g), config.lr_potentials, config.beta1, config.beta2
    )
    model.opt_eta = OptimizerState.for_block(
        rescaler.parameter_block(eta), config.lr_rescalers, config.beta1, config.beta2
    )
    model.opt_zeta = OptimizerState.for_block(
        rescaler.parameter_block(zeta), config.lr_rescalers, config.beta1, config.beta2
    )
    return model


def _check_uniform(batch: WeightedPointCloud, name: str) -> None:
    expected = 1.0 / batch.size
    if float(np.max(np.abs(batch.masses - expected))) > 1e-12:
        raise ValueError(f"{name} batch must carry uniform masses 1/size")


def _potential_step(
    model: NubotModel, x: torch.Tensor, y: torch.Tensor, e: torch.Tensor, z: torch.Tensor
) -> float:
    """Sequential minimax step: g descends, then f ascends against the
    updated map; f's ``Wz`` weights are clamped right after its step.
    Returns the objective value at the start of the step.
    """
    g_block = icnn.parameter_block(model.g)
    f_block = icnn.parameter_block(model.f)
    captured: dict[str, float] = {}

    def g_loss() -> torch.Tensor:
        y_hat = icnn.grad_x_torch(model.g, x, create_graph=True)
        f_of_push = icnn.forward_torch(model.f, y_hat)
        inner = (x * y_hat).sum(dim=1)
        transport = (e * (f_of_push - inner)).mean()
        with torch.no_grad():
            target_term = (z * icnn.forward_torch(model.f, y)).mean()
        captured["j"] = float(transport.detach() - target_term)
        return transport + icnn.convexity_penalty(model.g, model.config.lambda_penalty)

    (g_grads,) = grad_scalar(g_loss, [g_block])
    adam_step(g_block, g_grads, model.opt_g)

    y_hat_new = icnn.grad_x_torch(model.g, x).detach()

    def f_loss() -> torch.Tensor:
        loss = (z * icnn.forward_torch(model.f, y)).mean() - (
            e * icnn.forward_torch(model.f, y_hat_new)
        ).mean()
        if model.config.cycle_weight > 0.0:
            back = icnn.grad_x_torch(model.f, y_hat_new, create_graph=True)
            loss = loss + model.config.cycle_weight * ((back - x) ** 2).sum(dim=1).mean()
        return loss

    (f_grads,) = grad_scalar(f_loss, [f_block])
    adam_step(f_block, f_grads, model.opt_f, project=True)
    return captured["j"]


def _rescaler_step(model: NubotModel, x, y, e, z) -> tuple[float, float]:
    eta_block = rescaler.parameter_block(model.eta)
    zeta_block = rescaler.parameter_block(model.zeta)
    captured: dict[str, float] = {}

    def eta_loss() -> torch.Tensor:
        loss = rescaler.regression_loss(model.eta, x, e)
        captured["eta"] = float(loss.detach())
        return loss

    def zeta_loss() -> torch.Tensor:
        loss = rescaler.regression_loss(model.zeta, y, z)
        captured["zeta"] = float(loss.detach())
        return loss

    (eta_grads,) = grad_scalar(eta_loss, [eta_block])
    adam_step(eta_block, eta_grads, model.opt_eta)
    (zeta_grads,) = grad_scalar(zeta_loss, [zeta_block])
    adam_step(zeta_block, zeta_grads, model.opt_zeta)
    return captured["eta"], captured["zeta"]


def _summary(values: np.ndarray) -> tuple[float, float, float]:
    return float(values.min()), float(values.mean()), float(values.max())


def nubot_step(
    model: NubotModel, batch_x: WeightedPointCloud, batch_y: WeightedPointCloud
) -> tuple[NubotModel, StepDiagnostics]:
    """One full training step on a pair of uniform batches."""
    _check_uniform(batch_x, "source")
    _check_uniform(batch_y, "target")
    n, m = batch_x.size, batch_y.size
    x = torch.from_numpy(batch_x.points)
    y = torch.from_numpy(batch_y.points)

    # Current transport guesses, detached: the solver sees plain arrays.
    y_hat = icnn.grad_x_torch(model.g, x).detach().numpy()
    x_hat = icnn.grad_x_torch(model.f, y).detach().numpy()

    cfg = model.config.sinkhorn_config()
    gamma1 = sinkhorn_unbalanced(
        batch_x.masses, batch_y.masses, squared_cost(y_hat, batch_y.points), cfg
    )
    e = weights_from_coupling(gamma1, n).values
    gamma2 = sinkhorn_unbalanced(
        batch_y.masses, batch_x.masses, squared_cost(x_hat, batch_x.points), cfg
    )
    z = weights_from_coupling(gamma2, m).values

    e_t = torch.from_numpy(e)
    z_t = torch.from_numpy(z)
    with torch.no_grad():
        e_smooth = rescaler.forward_torch(model.eta, x)
        z_smooth = rescaler.forward_torch(model.zeta, y)
    j_value = _potential_step(model, x, y, e_smooth, z_smooth)
    eta_loss, zeta_loss = _rescaler_step(model, x, y, e_t, z_t)

    model.step += 1
    diag = StepDiagnostics(
        step=model.step,
        j_value=j_value,
        eta_loss=eta_loss,
        zeta_loss=zeta_loss,
        gamma1_mass=gamma1.total_mass(),
        gamma2_mass=gamma2.total_mass(),
        e_summary=_summary(e),
        z_summary=_summary(z),
    )
    return model, diag


def cellot_step(
    model: NubotModel, batch_x: WeightedPointCloud, batch_y: WeightedPointCloud
) -> tuple[NubotModel, StepDiagnostics]:
    """Ablation step: unit factors, no transport solves, no rescaler updates."""
    _check_uniform(batch_x, "source")
    _check_uniform(batch_y, "target")
    x = torch.from_numpy(batch_x.points)
    y = torch.from_numpy(batch_y.points)
    e_t = torch.ones(batch_x.size, dtype=torch.float64)
    z_t = torch.ones(batch_y.size, dtype=torch.float64)
    j_value = _potential_step(model, x, y, e_t, z_t)
    model.step += 1
    diag = StepDiagnostics(
        step=model.step,
        j_value=j_value,
        eta_loss=None,
        zeta_loss=None,
        gamma1_mass=None,
        gamma2_mass=None,
        e_summary=(1.0, 1.0, 1.0),
        z_summary=(1.0, 1.0, 1.0),
    )
    return model, diag


def train(
    config: TrainConfig,
    source: WeightedPointCloud,
    target: WeightedPointCloud,
    model: NubotModel | None = None,
    on_step: Callable[[NubotModel, StepDiagnostics], None] | None = None,
) -> NubotModel:
    """Run training up to ``config.steps`` total steps.

    Passing an existing model resumes from its step counter with its
    optimizer state; batches depend only on ``(seed, step)``, so a resumed
    run draws exactly the batches the uninterrupted run would have drawn.
    Raises ``FloatingPointError`` if the objective leaves the finite range.
    """
    if source.dim != target.dim:
        raise ValueError("source and target dimensions differ")
    if model is None:
        model = initialize_model(config, source.dim)
    else:
        # The config in force governs the continued steps and is what a
        # later checkpoint records; otherwise a resumed run would keep
        # stepping (and saving) under the budget it was interrupted at.
        model.config = config
    step_fn = nubot_step if config.mode == "nubot" else cellot_step
    for k in range(model.step, config.steps):
        batch_x = sample_batch(source, config.batch_source, seed=config.seed, step=k)
        batch_y = sample_batch(target, config.batch_target, seed=config.seed + 1, step=k)
        model, diag = step_fn(model, batch_x, batch_y)
        if not math.isfinite(diag.j_value):
            raise FloatingPointError(f"objective became non-finite at step {diag.step}")
        if on_step is not None:
            on_step(model, diag)
    return model


def dual_objective_value(
    model: NubotModel, batch_x: WeightedPointCloud, batch_y: WeightedPointCloud
) -> float:
    """Balanced dual transport value implied by the current potentials.

    Computed with unit factors regardless of mode; reporting only, never a
    training signal.  For exactly optimal potentials on balanced data this
    equals half the squared transport distance.
    """
    x = torch.from_numpy(batch_x.points)
    y = torch.from_numpy(batch_y.points)
    wx = torch.from_numpy(batch_x.masses / batch_x.masses.sum())
    wy = torch.from_numpy(batch_y.masses / batch_y.masses.sum())
    y_hat = icnn.grad_x_torch(model.g, x).detach()
    with torch.no_grad():
        constant = 0.5 * (wx * (x * x).sum(dim=1)).sum() + 0.5 * (
            wy * (y * y).sum(dim=1)
        ).sum()
        push_term = (
            wx * (icnn.forward_torch(model.f, y_hat) - (x * y_hat).sum(dim=1))
        ).sum()
        target_term = (wy * icnn.forward_torch(model.f, y)).sum()
    return float(constant + push_term - target_term)


def _optimizer_payload(state: OptimizerState) -> dict:
    return {
        "lr": state.lr,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps_stability": state.eps_stability,
        "step_count": state.step_count,
        "first_moment": {k: v.numpy().tolist() for k, v in state.first_moment.items()},
        "second_moment": {k: v.numpy().tolist() for k, v in state.second_moment.items()},
    }


def _optimizer_from_payload(data: dict, block) -> OptimizerState:
    state = OptimizerState(
        lr=float(data["lr"]),
        beta1=float(data["beta1"]),
        beta2=float(data["beta2"]),
        eps_stability=float(data["eps_stability"]),
        step_count=int(data["step_count"]),
    )
    for name, tensor in block.tensors.items():
        state.first_moment[name] = torch.from_numpy(
            np.asarray(data["first_moment"][name], dtype=np.float64).reshape(tensor.shape)
        )
        state.second_moment[name] = torch.from_numpy(
            np.asarray(data["second_moment"][name], dtype=np.float64).reshape(tensor.shape)
        )
    return state


def save_checkpoint(model: NubotModel, path: str | Path) -> None:
    """Single JSON document: config, step, all networks, optimizer state."""
    payload = {
        "kind": "nubot-model",
        "format": 1,
        "config": model.config.to_dict(),
        "step": model.step,
        "f": icnn.to_payload(model.f),
        "g": icnn.to_payload(model.g),
        "eta": rescaler.to_payload(model.eta),
        "zeta": rescaler.to_payload(model.zeta),
        "optimizers": {
            "f": _optimizer_payload(model.opt_f),
            "g": _optimizer_payload(model.opt_g),
            "eta": _optimizer_payload(model.opt_eta),
            "zeta": _optimizer_payload(model.opt_zeta),
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> NubotModel:
    payload = json.loads(Path(path).read_text())
    if payload.get("kind") != "nubot-model":
        raise ValueError("not a model checkpoint")
    config = TrainConfig.from_dict(payload["config"])
    model = NubotModel(
        f=icnn.from_payload(payload["f"]),
        g=icnn.from_payload(payload["g"]),
        eta=rescaler.from_payload(payload["eta"]),
        zeta=rescaler.from_payload(payload["zeta"]),
        config=config,
        step=int(payload["step"]),
    )
    opts = payload["optimizers"]
    model.opt_f = _optimizer_from_payload(opts["f"], icnn.parameter_block(model.f))
    model.opt_g = _optimizer_from_payload(opts["g"], icnn.parameter_block(model.g))
    model.opt_eta = _optimizer_from_payload(
        opts["eta"], rescaler.parameter_block(model.eta)
    )
    model.opt_zeta = _optimizer_from_payload(
        opts["zeta"], rescaler.parameter_block(model.zeta)
    )
    return model
