"""Strictly positive rescaling networks for mass creation and destruction.

A rescaler is a small multilayer perceptron whose scalar head is passed
through softplus and lifted by a tiny floor, so its output is positive for
every input.  Two of them amortize the per-batch reweighting factors found by
the unbalanced transport solves: one over source points, one over target
points.  They are fitted by plain mean-squared-error regression onto those
factors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .diffengine import ParameterBlock

__all__ = [
    "RescalerNet",
    "init_rescaler",
    "evaluate_weights",
    "regression_loss",
    "parameter_block",
    "to_payload",
    "from_payload",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class RescalerNet:
    weights: list[torch.Tensor]  # layer l: (width_l, fan_in_l)
    biases: list[torch.Tensor]  # (width_l,)
    activation: str = "rectifier"
    floor: float = 1e-6

    def __post_init__(self):
        if self.activation not in ("rectifier", "softplus"):
            raise ValueError("activation must be 'rectifier' or 'softplus'")
        if not (0.0 < self.floor < 1.0):
            raise ValueError("floor must lie in (0, 1)")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty parallel lists")
        if self.weights[-1].shape[0] != 1:
            raise ValueError("output head must have width one")

    @property
    def dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def widths(self) -> list[int]:
        return [w.shape[0] for w in self.weights]


def init_rescaler(
    dim: int,
    hidden: tuple[int, ...] = (32, 32),
    seed=0,
    activation: str = "rectifier",
    floor: float = 1e-6,
) -> RescalerNet:
    """Fan-in scaled random weights, zero biases; output near softplus(0)."""
    if dim < 1:
        raise ValueError("dim must be positive")
    rng = np.random.default_rng(seed)
    widths = list(hidden) + [1]
    weights, biases = [], []
    fan_in = dim
    for width in widths:
        weights.append(
            torch.from_numpy(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(width, fan_in)))
        )
        biases.append(torch.zeros(width, dtype=torch.float64))
        fan_in = width
    return RescalerNet(weights=weights, biases=biases, activation=activation, floor=floor)


def forward_torch(net: RescalerNet, x: torch.Tensor) -> torch.Tensor:
    """Positive outputs, shape (n,), as a torch graph."""
    h = x
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        pre = h @ w.T + b
        h = torch.relu(pre) if net.activation == "rectifier" else F.softplus(pre)
    pre = h @ net.weights[-1].T + net.biases[-1]
    return F.softplus(pre[:, 0]) + net.floor


def evaluate_weights(net: RescalerNet, x) -> np.ndarray:
    """Rescaling factors for a batch of points; always strictly positive."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.shape[1] != net.dim:
        raise ValueError(f"expected points of dimension {net.dim}")
    with torch.no_grad():
        out = forward_torch(net, torch.from_numpy(np.ascontiguousarray(arr)))
    values = out.numpy()
    return values[0] if single else values


def regression_loss(net: RescalerNet, x: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean squared error against per-point target factors."""
    if x.shape[0] != targets.shape[0]:
        raise ValueError("points and targets must have matching length")
    out = forward_torch(net, x)
    return ((out - targets) ** 2).mean()


def parameter_block(net: RescalerNet) -> ParameterBlock:
    tensors: dict[str, torch.Tensor] = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        tensors[f"w_{i}"] = w
        tensors[f"b_{i}"] = b
    return ParameterBlock(tensors=tensors)


def to_payload(net: RescalerNet) -> dict:
    return {
        "kind": "rescaler-net",
        "format": 1,
        "dim": net.dim,
        "widths": net.widths,
        "activation": net.activation,
        "floor": float(net.floor),
        "layers": [
            {"w": w.numpy().tolist(), "b": b.numpy().tolist()}
            for w, b in zip(net.weights, net.biases)
        ],
    }


def from_payload(payload: dict) -> RescalerNet:
    if payload.get("kind") != "rescaler-net":
        raise ValueError("not a rescaler checkpoint")
    dim = int(payload["dim"])
    widths = [int(w) for w in payload["widths"]]
    weights, biases = [], []
    fan_in = dim
    for width, layer in zip(widths, payload["layers"], strict=True):
        weights.append(
            torch.from_numpy(np.asarray(layer["w"], dtype=np.float64).reshape(width, fan_in))
        )
        biases.append(
            torch.from_numpy(np.asarray(layer["b"], dtype=np.float64).reshape(width))
        )
        fan_in = width
    return RescalerNet(
        weights=weights,
        biases=biases,
        activation=str(payload["activation"]),
        floor=float(payload["floor"]),
    )


def save_checkpoint(net: RescalerNet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_payload(net), indent=1))


def load_checkpoint(path: str | Path) -> RescalerNet:
    return from_payload(json.loads(Path(path).read_text()))
