"""Input-convex potentials and their gradient maps.

A potential is a stack of layers ``z_{l+1} = act(Wx_l x + Wz_l z_l + b_l)``
(the first layer has no ``z`` input; the last layer has width one and is
affine, with no activation) plus an explicit quadratic term::

    psi(x) = z_L(x) + 0.5 * skip * |x|^2

With nonnegative ``Wz`` matrices, a nondecreasing convex activation, and a
nonnegative skip coefficient, ``psi`` is convex in ``x``; its gradient map
``x -> grad psi(x)`` is then a valid transport map candidate.  Convexity of a
trained potential is maintained either by clamping ``Wz`` after each
optimizer step ("clamp") or by penalizing negative entries ("penalty").

The default initialization keeps only the final layer's weights tiny, so the
gradient map starts out indistinguishable from the identity while the hidden
stack still carries full-strength features and gradients: training begins
from the do-nothing transport without starting in a vanishing-gradient basin.
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
    "IcnnPotential",
    "init_identity",
    "evaluate",
    "gradient_map",
    "convexity_project",
    "convexity_penalty",
    "parameter_block",
    "to_payload",
    "from_payload",
    "save_checkpoint",
    "load_checkpoint",
]

_ACTIVATIONS = ("rectifier", "softplus")


@dataclass
class IcnnPotential:
    """Layer parameters plus the structural knobs of the potential."""

    w_x: list[torch.Tensor]  # layer l: (width_l, dim)
    w_z: list[torch.Tensor]  # layer 0: (width_0, 0); layer l: (width_l, width_{l-1})
    b: list[torch.Tensor]  # (width_l,)
    activation: str = "rectifier"
    quadratic_skip_coefficient: float = 1.0
    enforcement: str = "clamp"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        if self.enforcement not in ("clamp", "penalty"):
            raise ValueError("enforcement must be 'clamp' or 'penalty'")
        if self.quadratic_skip_coefficient < 0.0:
            raise ValueError("quadratic skip coefficient must be nonnegative")
        if not (len(self.w_x) == len(self.w_z) == len(self.b)):
            raise ValueError("layer lists must have equal length")
        if not self.w_x:
            raise ValueError("potential needs at least one layer")
        if self.w_x[-1].shape[0] != 1:
            raise ValueError("last layer must have width one")

    @property
    def dim(self) -> int:
        return self.w_x[0].shape[1]

    @property
    def widths(self) -> list[int]:
        return [w.shape[0] for w in self.w_x]


def init_identity(
    dim: int,
    hidden: tuple[int, ...] = (64, 64, 64, 64),
    seed=0,
    activation: str = "rectifier",
    enforcement: str = "clamp",
    scale: float = 1e-6,
) -> IcnnPotential:
    """Potential whose gradient map starts as the identity.

    Hidden layers use fan-in scaled weights (``Wx`` at 1/sqrt(dim), ``Wz``
    entries at |normal|/fan so activations neither die nor explode), while
    the final width-one layer is drawn at the given tiny scale.  The
    network's contribution to the gradient is therefore negligible at the
    start — the quadratic skip alone acts, giving the identity map — yet
    the hidden stack computes full-strength features from step one, so the
    output layer's healthy gradients can wake the network up quickly.
    Keeping every layer tiny instead would satisfy the identity property
    too, but leaves early layers with gradients suppressed by products of
    tiny factors, and the map never trains away from the identity.
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    if scale <= 0.0:
        raise ValueError("scale must be positive")
    rng = np.random.default_rng(seed)
    widths = list(hidden) + [1]
    w_x, w_z, b = [], [], []
    previous = 0
    for i, width in enumerate(widths):
        last = i == len(widths) - 1
        sx = scale if last else 1.0 / np.sqrt(dim)
        sz = scale if last else 1.0 / max(previous, 1)
        w_x.append(torch.from_numpy(rng.normal(0.0, sx, size=(width, dim))))
        w_z.append(torch.from_numpy(np.abs(rng.normal(0.0, sz, size=(width, previous)))))
        b.append(torch.zeros(width, dtype=torch.float64))
        previous = width
    return IcnnPotential(
        w_x=w_x,
        w_z=w_z,
        b=b,
        activation=activation,
        quadratic_skip_coefficient=1.0,
        enforcement=enforcement,
    )


def _activate(pre: torch.Tensor, activation: str) -> torch.Tensor:
    if activation == "rectifier":
        return torch.relu(pre)
    return F.softplus(pre)


def forward_torch(psi: IcnnPotential, x: torch.Tensor) -> torch.Tensor:
    """Batched potential values as a torch graph; ``x`` is (n, dim).

    The activation sits between layers; the final width-one layer is affine,
    which keeps the network convex (its ``Wz`` is still nonnegative) while
    letting the value take either sign and pass gradients unconditionally.
    A rectified output would instead let training push the last
    pre-activation negative and silently freeze the whole potential at the
    bare quadratic.
    """
    if len(psi.w_x) == 1:
        z = x @ psi.w_x[0].T + psi.b[0]
    else:
        z = _activate(x @ psi.w_x[0].T + psi.b[0], psi.activation)
        for w_x, w_z, bias in zip(psi.w_x[1:-1], psi.w_z[1:-1], psi.b[1:-1]):
            z = _activate(x @ w_x.T + z @ w_z.T + bias, psi.activation)
        z = x @ psi.w_x[-1].T + z @ psi.w_z[-1].T + psi.b[-1]
    quad = 0.5 * psi.quadratic_skip_coefficient * (x * x).sum(dim=1)
    return z[:, 0] + quad


def grad_x_torch(
    psi: IcnnPotential, x: torch.Tensor, create_graph: bool = False
) -> torch.Tensor:
    """Exact gradient map as a torch tensor.

    With ``create_graph=True`` the result stays differentiable with respect
    to the layer parameters, which is what lets losses containing
    ``grad psi`` be optimized over those parameters.
    """
    xg = x.detach().requires_grad_(True)
    value = forward_torch(psi, xg).sum()
    (grad,) = torch.autograd.grad(value, xg, create_graph=create_graph)
    return grad


def _as_batch(x) -> tuple[torch.Tensor, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    return torch.from_numpy(np.ascontiguousarray(arr)), single


def evaluate(psi: IcnnPotential, x) -> float | np.ndarray:
    """Potential value at a point (scalar) or batch of points (vector)."""
    t, single = _as_batch(x)
    if t.shape[1] != psi.dim:
        raise ValueError(f"expected points of dimension {psi.dim}")
    with torch.no_grad():
        values = forward_torch(psi, t)
    out = values.numpy()
    return float(out[0]) if single else out


def gradient_map(psi: IcnnPotential, x) -> np.ndarray:
    """Gradient of the potential at a point or batch, same shape as input."""
    t, single = _as_batch(x)
    if t.shape[1] != psi.dim:
        raise ValueError(f"expected points of dimension {psi.dim}")
    grad = grad_x_torch(psi, t).detach().numpy()
    return grad[0] if single else grad


def parameter_block(psi: IcnnPotential) -> ParameterBlock:
    """Live view of the trainable tensors; ``Wz`` flagged under clamping."""
    tensors: dict[str, torch.Tensor] = {}
    nonneg: dict[str, bool] = {}
    for i, (w_x, w_z, bias) in enumerate(zip(psi.w_x, psi.w_z, psi.b)):
        tensors[f"w_x_{i}"] = w_x
        tensors[f"b_{i}"] = bias
        if w_z.numel():
            tensors[f"w_z_{i}"] = w_z
            nonneg[f"w_z_{i}"] = psi.enforcement == "clamp"
    # as_tensor in the block constructor keeps the same float64 tensors, so
    # the block is a live view: optimizer steps mutate the potential itself.
    return ParameterBlock(tensors=tensors, nonneg=nonneg)


def convexity_project(psi: IcnnPotential) -> None:
    """Clamp negative ``Wz`` entries to zero; requires clamp enforcement."""
    if psi.enforcement != "clamp":
        raise ValueError("projection applies to clamp-enforced potentials")
    for w_z in psi.w_z:
        if w_z.numel():
            w_z.clamp_(min=0.0)


def convexity_penalty(psi: IcnnPotential, strength: float) -> torch.Tensor:
    """Squared Frobenius norm of negative ``Wz`` parts, scaled by strength.

    Returned as a scalar tensor so it can join a differentiable objective;
    requires penalty enforcement.
    """
    if psi.enforcement != "penalty":
        raise ValueError("penalty applies to penalty-enforced potentials")
    if strength < 0.0:
        raise ValueError("penalty strength must be nonnegative")
    total = torch.zeros((), dtype=torch.float64)
    for w_z in psi.w_z:
        if w_z.numel():
            total = total + torch.clamp(-w_z, min=0.0).pow(2).sum()
    return strength * total


def min_wz_entry(psi: IcnnPotential) -> float:
    """Smallest ``Wz`` entry; zero or above means the clamp invariant holds."""
    lows = [float(w_z.min()) for w_z in psi.w_z if w_z.numel()]
    return min(lows) if lows else 0.0


def to_payload(psi: IcnnPotential) -> dict:
    return {
        "kind": "icnn-potential",
        "format": 1,
        "dim": psi.dim,
        "widths": psi.widths,
        "activation": psi.activation,
        "enforcement": psi.enforcement,
        "quadratic_skip_coefficient": float(psi.quadratic_skip_coefficient),
        "layers": [
            {
                "w_x": w_x.numpy().tolist(),
                "w_z": w_z.numpy().tolist(),
                "b": bias.numpy().tolist(),
            }
            for w_x, w_z, bias in zip(psi.w_x, psi.w_z, psi.b)
        ],
    }


def from_payload(payload: dict) -> IcnnPotential:
    if payload.get("kind") != "icnn-potential":
        raise ValueError("not a potential checkpoint")
    dim = int(payload["dim"])
    widths = [int(w) for w in payload["widths"]]
    w_x, w_z, b = [], [], []
    previous = 0
    for width, layer in zip(widths, payload["layers"], strict=True):
        wx = np.asarray(layer["w_x"], dtype=np.float64).reshape(width, dim)
        wz = np.asarray(layer["w_z"], dtype=np.float64).reshape(width, previous)
        bias = np.asarray(layer["b"], dtype=np.float64).reshape(width)
        w_x.append(torch.from_numpy(wx))
        w_z.append(torch.from_numpy(wz))
        b.append(torch.from_numpy(bias))
        previous = width
    return IcnnPotential(
        w_x=w_x,
        w_z=w_z,
        b=b,
        activation=str(payload["activation"]),
        quadratic_skip_coefficient=float(payload["quadratic_skip_coefficient"]),
        enforcement=str(payload["enforcement"]),
    )


def save_checkpoint(psi: IcnnPotential, path: str | Path) -> None:
    """Self-describing JSON checkpoint; round-trips doubles bit-exactly."""
    Path(path).write_text(json.dumps(to_payload(psi), indent=1))


def load_checkpoint(path: str | Path) -> IcnnPotential:
    return from_payload(json.loads(Path(path).read_text()))
