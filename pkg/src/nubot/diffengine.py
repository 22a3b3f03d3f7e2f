"""Gradients and optimization for the trainable networks.

Parameters live in named blocks of double-precision torch tensors.  Losses
are closures that rebuild their computation from those tensors; gradients are
exact reverse-mode derivatives.  Losses may embed input-gradients of a
network (the transport objective differentiates through one), which works
because the input-gradient is itself assembled as a differentiable graph.

Every loss can be validated end to end against central finite differences
via :func:`finite_difference_check`.  The optimizer is the standard
bias-corrected adaptive-moment update, with an optional nonnegativity
projection applied after the step for tensors flagged in the block.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

__all__ = [
    "ParameterBlock",
    "OptimizerState",
    "grad_scalar",
    "finite_difference_check",
    "adam_step",
]

LossFn = Callable[[], torch.Tensor]


def _as_param(value) -> torch.Tensor:
    t = torch.as_tensor(value, dtype=torch.float64)
    if not torch.all(torch.isfinite(t)):
        raise ValueError("parameter tensors must be finite")
    return t


@dataclass
class ParameterBlock:
    """Named double-precision tensors plus per-tensor nonnegativity flags."""

    tensors: dict[str, torch.Tensor]
    nonneg: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = {name: _as_param(t) for name, t in self.tensors.items()}
        unknown = set(self.nonneg) - set(self.tensors)
        if unknown:
            raise ValueError(f"nonneg flags for unknown tensors: {sorted(unknown)}")
        self.nonneg = {name: bool(self.nonneg.get(name, False)) for name in self.tensors}

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def leaves(self) -> list[torch.Tensor]:
        return list(self.tensors.values())

    def project_nonneg(self) -> None:
        for name, flagged in self.nonneg.items():
            if flagged:
                self.tensors[name].clamp_(min=0.0)

    def violates_nonneg(self) -> bool:
        return any(
            flagged and bool((self.tensors[name] < 0.0).any())
            for name, flagged in self.nonneg.items()
        )


@dataclass
class OptimizerState:
    """Adaptive-moment state for one parameter block; single writer."""

    lr: float
    beta1: float = 0.5
    beta2: float = 0.9
    eps_stability: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, torch.Tensor] = field(default_factory=dict)
    second_moment: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValueError("learning rate must be positive")
        for beta in (self.beta1, self.beta2):
            if not (0.0 <= beta < 1.0):
                raise ValueError("betas must lie in [0, 1)")

    @classmethod
    def for_block(
        cls,
        block: ParameterBlock,
        lr: float,
        beta1: float = 0.5,
        beta2: float = 0.9,
        eps_stability: float = 1e-8,
    ) -> "OptimizerState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps_stability=eps_stability)
        for name, t in block.tensors.items():
            state.first_moment[name] = torch.zeros_like(t)
            state.second_moment[name] = torch.zeros_like(t)
        return state


def grad_scalar(
    loss_fn: LossFn, blocks: Sequence[ParameterBlock]
) -> list[dict[str, torch.Tensor]]:
    """Exact gradients of a scalar loss with respect to every block tensor.

    The loss closure is evaluated once with gradients enabled.  Tensors the
    loss does not touch get zero gradients.  Mixed second derivatives are
    supported: if the closure builds an input-gradient of a network with
    ``create_graph=True``, its dependence on the parameters is differentiated
    exactly rather than approximated.
    """
    leaves = [t for block in blocks for t in block.leaves()]
    for t in leaves:
        t.requires_grad_(True)
    try:
        loss = loss_fn()
        if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
            raise ValueError("loss must evaluate to a scalar tensor")
        if loss.requires_grad:
            raw = torch.autograd.grad(loss, leaves, allow_unused=True)
        else:  # constant loss: gradient is identically zero
            raw = [None] * len(leaves)
    finally:
        for t in leaves:
            t.requires_grad_(False)
    out: list[dict[str, torch.Tensor]] = []
    i = 0
    for block in blocks:
        grads = {}
        for name, t in block.tensors.items():
            g = raw[i]
            i += 1
            grads[name] = torch.zeros_like(t) if g is None else g.detach()
        out.append(grads)
    return out


def finite_difference_check(
    loss_fn: LossFn,
    blocks: Sequence[ParameterBlock],
    step: float = 1e-4,
    max_coords: int = 64,
    seed: int = 0,
) -> float:
    """Worst relative error between exact and central-difference gradients.

    For each tensor, up to ``max_coords`` coordinates are probed (all of them
    for small tensors, a seeded random subset otherwise).  The error for one
    coordinate is ``|ad - fd| / max(|ad|, |fd|, 1)``, i.e. relative for large
    gradients and absolute near zero.
    """
    if not (1e-6 <= step <= 1e-3):
        raise ValueError("step must lie in [1e-6, 1e-3]")
    analytic = grad_scalar(loss_fn, blocks)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for block, grads in zip(blocks, analytic):
        for name, tensor in block.tensors.items():
            flat = tensor.view(-1)
            numel = flat.numel()
            if numel == 0:
                continue
            if numel <= max_coords:
                coords = np.arange(numel)
            else:
                coords = rng.choice(numel, size=max_coords, replace=False)
            gflat = grads[name].view(-1)
            for idx in coords:
                idx = int(idx)
                original = float(flat[idx])
                flat[idx] = original + step
                plus = float(loss_fn().detach())
                flat[idx] = original - step
                minus = float(loss_fn().detach())
                flat[idx] = original
                fd = (plus - minus) / (2.0 * step)
                ad = float(gflat[idx])
                err = abs(ad - fd) / max(abs(ad), abs(fd), 1.0)
                worst = max(worst, err)
    return worst


def adam_step(
    block: ParameterBlock,
    grads: dict[str, torch.Tensor],
    state: OptimizerState,
    project: bool = False,
) -> tuple[ParameterBlock, OptimizerState]:
    """One bias-corrected adaptive-moment update, in place.

    With ``project=True`` the block's nonnegativity projection runs after the
    update, so flagged tensors come out elementwise nonnegative.
    """
    missing = set(block.tensors) - set(grads)
    if missing:
        raise ValueError(f"missing gradients for: {sorted(missing)}")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.step_count
    correction2 = 1.0 - b2**state.step_count
    for name, tensor in block.tensors.items():
        g = grads[name]
        if g.shape != tensor.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / correction2).sqrt_().add_(state.eps_stability)
        tensor.addcdiv_(m, denom, value=-state.lr / correction1)
    if project:
        block.project_nonneg()
    return block, state
