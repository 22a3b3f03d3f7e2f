"""Discrete entropic optimal transport between weighted point sets.

Solves two problems over nonnegative plans G for a cost matrix C:

* balanced:    min <G, C> - eps * H(G)   subject to both marginals fixed,
* unbalanced:  min <G, C> + tau1 * KL(G 1 | u) + tau2 * KL(G^T 1 | v)
                                       - eps * H(G),

with the entropy H(G) = -sum_ij G_ij (log G_ij - 1) and the unnormalized
divergence KL(p | q) = sum_i p_i log(p_i / q_i) - p_i + q_i.  Both are solved
by Sinkhorn-type scaling iterations; the unbalanced case damps each dual
update with the exponent tau / (tau + eps).

The implementation keeps the duals in log domain so that tiny kernels
(eps far below the cost scale) never underflow, but runs the inner loop on an
absorbed kernel in linear domain for speed: the accumulated duals are folded
into the kernel whenever the residual scalings grow too large.

A deliberately slow, solver-independent check lives in
:func:`oracle_grid_search`: exhaustive per-entry grid minimization of the
unbalanced objective, usable for plans with at most nine entries.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

__all__ = [
    "CostMatrix",
    "SinkhornConfig",
    "Coupling",
    "BatchWeights",
    "squared_cost",
    "sinkhorn_balanced",
    "sinkhorn_unbalanced",
    "weights_from_coupling",
    "fixed_point_weights",
    "oracle_grid_search",
    "unbalanced_objective",
    "balanced_objective",
    "closed_form_mass_1x1",
    "coupling_to_csv",
]

# Residual log-scaling magnitude that triggers folding the duals into the
# kernel.  exp(+-_ABSORB_LIMIT) stays comfortably inside float64 range.
_ABSORB_LIMIT = 250.0

# Kernel exponents are floored here before exponentiation.  exp(-700) is about
# 1e-304: far below every tolerance in this module, but still a normal float,
# which keeps the vectorized exp out of the (very slow) subnormal path.
_EXP_FLOOR = -700.0


def _exp_floored(arg: np.ndarray) -> np.ndarray:
    return np.exp(np.maximum(arg, _EXP_FLOOR, out=arg))


@dataclass(frozen=True)
class CostMatrix:
    """Pairwise transport costs; entries must be finite and nonnegative."""

    values: np.ndarray  # (n, m)

    def __post_init__(self):
        values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if values.ndim != 2 or values.size == 0:
            raise ValueError("cost matrix must be a non-empty 2-d array")
        if not np.all(np.isfinite(values)) or np.any(values < 0.0):
            raise ValueError("cost entries must be finite and nonnegative")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver parameters.

    ``tau1``/``tau2`` control how strongly the two marginals are enforced;
    ``math.inf`` recovers hard constraints (use the balanced solver).  The
    iteration stops once the max-abs change of the log-domain duals over a
    full sweep drops below ``tolerance``.
    """

    epsilon: float = 0.005
    tau1: float = 0.05
    tau2: float = 0.05
    tolerance: float = 1e-6
    max_iterations: int = 2000

    def __post_init__(self):
        if not (self.epsilon > 0.0 and math.isfinite(self.epsilon)):
            raise ValueError("epsilon must be positive and finite")
        for tau in (self.tau1, self.tau2):
            if not tau > 0.0:
                raise ValueError("tau must be positive (inf allowed)")
        if not (self.tolerance > 0.0 and math.isfinite(self.tolerance)):
            raise ValueError("tolerance must be positive and finite")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True)
class Coupling:
    """A transport plan with realized marginals and log-domain duals.

    The duals satisfy ``plan = exp(dual_u[:, None] + dual_v[None, :] - C/eps)``
    for solver-produced couplings; for the grid-search oracle they are a
    least-squares factorization retained for debugging only.
    """

    plan: np.ndarray  # (n, m) >= 0
    row_marginal: np.ndarray  # (n,)
    col_marginal: np.ndarray  # (m,)
    iterations: int
    converged: bool
    dual_u: np.ndarray  # (n,) log-domain
    dual_v: np.ndarray  # (m,) log-domain

    def total_mass(self) -> float:
        return float(np.sum(self.row_marginal))


@dataclass(frozen=True)
class BatchWeights:
    """Nonnegative per-point weights attached to one side of a batch."""

    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if values.ndim != 1 or values.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if not np.all(np.isfinite(values)) or np.any(values < 0.0):
            raise ValueError("weights must be finite and nonnegative")
        object.__setattr__(self, "values", values)

    def summary(self) -> tuple[float, float, float]:
        v = self.values
        return float(v.min()), float(v.mean()), float(v.max())


def squared_cost(x: np.ndarray, y: np.ndarray) -> CostMatrix:
    """Pairwise squared Euclidean distances ``C_ij = |x_i - y_j|^2``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise ValueError(
            f"dimension mismatch: x has d={x.shape[1]}, y has d={y.shape[1]}"
        )
    values = cdist(x, y, metric="sqeuclidean")
    # cdist can produce tiny negative values from cancellation; clip exactly.
    np.maximum(values, 0.0, out=values)
    return CostMatrix(values)


def _validate_masses(u: np.ndarray, v: np.ndarray, shape: tuple[int, int]):
    u = np.ascontiguousarray(np.asarray(u, dtype=np.float64))
    v = np.ascontiguousarray(np.asarray(v, dtype=np.float64))
    if u.shape != (shape[0],) or v.shape != (shape[1],):
        raise ValueError("mass vectors must match the cost matrix shape")
    for name, vec in (("u", u), ("v", v)):
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"{name} contains non-finite masses")
        if np.any(vec <= 0.0):
            raise ValueError(f"{name} contains zero or negative masses")
    return u, v


def _as_cost(C) -> np.ndarray:
    if isinstance(C, CostMatrix):
        return C.values
    return CostMatrix(C).values


def _log_sweep(log_k, log_a, log_b, t, fi1, fi2):
    """One exact damped sweep fully in log domain (slow, always safe)."""
    m1 = log_k + t[None, :]
    mx = np.max(m1, axis=1)
    lse = mx + np.log(np.sum(_exp_floored(m1 - mx[:, None]), axis=1))
    s = fi1 * (log_a - lse)
    m2 = log_k + s[:, None]
    mx = np.max(m2, axis=0)
    lse = mx + np.log(np.sum(_exp_floored(m2 - mx[None, :]), axis=0))
    t = fi2 * (log_b - lse)
    return s, t


def _guess_duals(log_k, log_a, log_b, fi1, fi2):
    """Cheap dual initialization replacing the log-sum-exp with a max.

    Exact for eps -> 0 and always the right order of magnitude, which is all
    the absorbed loop needs to start from a kernel with nonzero rows.  Any
    residual error is corrected by the damped sweeps (or, in pathological
    cases, by the guarded log-domain fallback).
    """
    s = fi1 * (log_a - np.max(log_k, axis=1))
    t = fi2 * (log_b - np.max(log_k + s[:, None], axis=0))
    return s, t


def _solve_scaling(C, u, v, cfg: SinkhornConfig, fi1: float, fi2: float):
    """Shared damped-scaling engine; fi = 1 recovers the balanced iteration."""
    log_k = -C / cfg.epsilon
    log_a = np.log(u)
    log_b = np.log(v)
    n, m = C.shape
    tol = cfg.tolerance

    s, t = _guess_duals(log_k, log_a, log_b, fi1, fi2)
    iterations = 0
    converged = False

    # Absorbed linear-domain loop: the kernel carries the accumulated duals
    # and the residual scalings stay O(1) between absorptions, so each sweep
    # is two matrix-vector products instead of two log-sum-exps.
    def absorb():
        kt = _exp_floored(s[:, None] + t[None, :] + log_k)
        log_r1 = fi1 * log_a + (fi1 - 1.0) * s
        log_r2 = fi2 * log_b + (fi2 - 1.0) * t
        return kt, kt.T, log_r1, log_r2

    kt, kt_t, log_r1, log_r2 = absorb()
    ulog = np.zeros(n)
    vlog = np.zeros(m)
    v_lin = np.ones(m)
    while iterations < cfg.max_iterations:
        kv = kt @ v_lin
        low = kv.min()
        if not (low > 0.0 and np.isfinite(low)):
            # Stale or underflowed kernel: redo this sweep exactly in log
            # domain from the last finite duals, then rebuild the kernel.
            s, t = _log_sweep(log_k, log_a, log_b, t + vlog, fi1, fi2)
            kt, kt_t, log_r1, log_r2 = absorb()
            ulog = np.zeros(n)
            vlog = np.zeros(m)
            v_lin = np.ones(m)
            iterations += 1
            continue
        ulog_new = log_r1 - fi1 * np.log(kv)
        ku = kt_t @ np.exp(ulog_new)
        low = ku.min()
        if not (low > 0.0 and np.isfinite(low)):
            s, t = _log_sweep(log_k, log_a, log_b, t + vlog, fi1, fi2)
            kt, kt_t, log_r1, log_r2 = absorb()
            ulog = np.zeros(n)
            vlog = np.zeros(m)
            v_lin = np.ones(m)
            iterations += 1
            continue
        vlog_new = log_r2 - fi2 * np.log(ku)
        du = np.abs(ulog_new - ulog).max()
        dv = np.abs(vlog_new - vlog).max()
        ulog, vlog = ulog_new, vlog_new
        v_lin = np.exp(vlog)
        iterations += 1
        if du < tol and dv < tol:
            converged = True
            break
        if iterations % 8 == 0 and (
            np.abs(ulog).max() > _ABSORB_LIMIT or np.abs(vlog).max() > _ABSORB_LIMIT
        ):
            s = s + ulog
            t = t + vlog
            kt, kt_t, log_r1, log_r2 = absorb()
            ulog = np.zeros(n)
            vlog = np.zeros(m)
            v_lin = np.ones(m)
    s = s + ulog
    t = t + vlog

    plan = _exp_floored(s[:, None] + t[None, :] + log_k)
    row = plan.sum(axis=1)
    col = plan.sum(axis=0)
    return Coupling(
        plan=plan,
        row_marginal=row,
        col_marginal=col,
        iterations=iterations,
        converged=converged,
        dual_u=s,
        dual_v=t,
    )


def sinkhorn_balanced(u, v, C, cfg: SinkhornConfig = SinkhornConfig()) -> Coupling:
    """Entropic plan with both marginals fixed; requires equal total masses."""
    C = _as_cost(C)
    u, v = _validate_masses(u, v, C.shape)
    if abs(float(np.sum(u)) - float(np.sum(v))) > 1e-8:
        raise ValueError("balanced transport needs equal total masses")
    return _solve_scaling(C, u, v, cfg, fi1=1.0, fi2=1.0)


def sinkhorn_unbalanced(u, v, C, cfg: SinkhornConfig = SinkhornConfig()) -> Coupling:
    """Entropic plan with KL-relaxed marginals; total mass may shrink or grow."""
    C = _as_cost(C)
    u, v = _validate_masses(u, v, C.shape)
    if not (math.isfinite(cfg.tau1) and math.isfinite(cfg.tau2)):
        raise ValueError("tau must be finite here; use sinkhorn_balanced for inf")
    fi1 = cfg.tau1 / (cfg.tau1 + cfg.epsilon)
    fi2 = cfg.tau2 / (cfg.tau2 + cfg.epsilon)
    return _solve_scaling(C, u, v, cfg, fi1=fi1, fi2=fi2)


def weights_from_coupling(coupling: Coupling, count: int) -> BatchWeights:
    """Relative row masses scaled to sum to ``count``.

    ``count`` must equal the number of rows, so the mean weight is exactly 1.
    """
    row = coupling.row_marginal
    if count != row.shape[0]:
        raise ValueError("count must equal the number of coupling rows")
    total = float(np.sum(row))
    if total <= 0.0:
        raise ValueError("coupling has zero total mass")
    return BatchWeights(row * (count / total))


def fixed_point_weights(
    x: np.ndarray,
    y: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    cfg: SinkhornConfig = SinkhornConfig(),
    iterations: int = 1,
) -> BatchWeights:
    """Self-consistent source reweighting by repeated unbalanced solves.

    Each pass solves the unbalanced problem from ``e * u`` to ``v`` and resets
    ``e`` to the normalized row marginal (total mass 1 against ``u``).  A
    single pass is the approximation used inside the training loop; more
    passes approach the fixed point.
    """
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    C = squared_cost(x, y)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    e = np.ones_like(u)
    for _ in range(iterations):
        coupling = sinkhorn_unbalanced(e * u, v, C, cfg)
        row = coupling.row_marginal
        total = float(np.sum(row))
        if total <= 0.0:
            raise ValueError("fixed-point iteration collapsed to zero mass")
        e_new = (row / total) / u
        change = float(np.max(np.abs(e_new - e)))
        e = e_new
        if change < cfg.tolerance:
            break
    return BatchWeights(e)


def _kl_term(p: np.ndarray, q: np.ndarray) -> float:
    out = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0) / q), 0.0)
    return float(np.sum(out - p + q))


def unbalanced_objective(plan, u, v, C, cfg: SinkhornConfig) -> float:
    """Value of the KL-relaxed entropic objective at an arbitrary plan."""
    plan = np.asarray(plan, dtype=np.float64)
    C = _as_cost(C)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    entropy = np.where(plan > 0.0, plan * (np.log(np.where(plan > 0.0, plan, 1.0)) - 1.0), 0.0)
    value = float(np.sum(C * plan)) + cfg.epsilon * float(np.sum(entropy))
    value += cfg.tau1 * _kl_term(plan.sum(axis=1), u)
    value += cfg.tau2 * _kl_term(plan.sum(axis=0), v)
    return value


def balanced_objective(plan, C, cfg: SinkhornConfig) -> float:
    """Transport cost minus scaled entropy, marginal terms omitted."""
    plan = np.asarray(plan, dtype=np.float64)
    C = _as_cost(C)
    entropy = np.where(plan > 0.0, plan * (np.log(np.where(plan > 0.0, plan, 1.0)) - 1.0), 0.0)
    return float(np.sum(C * plan)) + cfg.epsilon * float(np.sum(entropy))


def closed_form_mass_1x1(u: float, v: float, cost: float, cfg: SinkhornConfig) -> float:
    """Optimal plan mass for a single source/target pair.

    Stationarity of the unbalanced objective in the single entry ``m`` reads
    ``cost + eps log m + tau1 log(m/u) + tau2 log(m/v) = 0``, hence
    ``m = exp((tau1 log u + tau2 log v - cost) / (eps + tau1 + tau2))``.
    """
    if u <= 0.0 or v <= 0.0:
        raise ValueError("masses must be positive")
    if not (math.isfinite(cfg.tau1) and math.isfinite(cfg.tau2)):
        raise ValueError("closed form requires finite tau")
    num = cfg.tau1 * math.log(u) + cfg.tau2 * math.log(v) - cost
    return math.exp(num / (cfg.epsilon + cfg.tau1 + cfg.tau2))


def oracle_grid_search(
    u,
    v,
    C,
    cfg: SinkhornConfig = SinkhornConfig(),
    coarse: float = 1e-4,
    fine: float = 1e-6,
    max_sweeps: int = 200,
) -> Coupling:
    """Exhaustive per-entry grid minimization of the unbalanced objective.

    Cyclic coordinate descent where each entry is minimized over a full grid
    at resolution ``coarse``, then refined once on a local grid at resolution
    ``fine``.  The objective is strictly convex, so this converges to the
    global minimum up to grid resolution.  Restricted to plans with at most
    nine entries; intended as an independent check of the scaling solver, so
    it shares no code with it.
    """
    C = _as_cost(C)
    u, v = _validate_masses(u, v, C.shape)
    if not (math.isfinite(cfg.tau1) and math.isfinite(cfg.tau2)):
        raise ValueError("grid-search oracle requires finite tau")
    n, m = C.shape
    if n * m > 9:
        raise ValueError("grid-search oracle is limited to at most 9 plan entries")

    upper = 4.0 * max(float(np.max(u)), float(np.max(v)), float(np.sum(u)), float(np.sum(v)))
    eps, tau1, tau2 = cfg.epsilon, cfg.tau1, cfg.tau2

    def entry_objective(t, c, r_rest, c_rest, ui, vj):
        # Terms of the objective that depend on a single entry value t.
        ent = np.where(t > 0.0, t * (np.log(np.where(t > 0.0, t, 1.0)) - 1.0), 0.0)
        r = r_rest + t
        ccol = c_rest + t
        kl1 = np.where(r > 0.0, r * np.log(np.where(r > 0.0, r, 1.0) / ui), 0.0) - r
        kl2 = np.where(ccol > 0.0, ccol * np.log(np.where(ccol > 0.0, ccol, 1.0) / vj), 0.0) - ccol
        return c * t + eps * ent + tau1 * kl1 + tau2 * kl2

    plan = np.full((n, m), min(1.0, upper / 4.0) * 0.5)
    row = plan.sum(axis=1)
    col = plan.sum(axis=0)

    def sweep(grid_builder):
        biggest_move = 0.0
        for i in range(n):
            for j in range(m):
                t_old = plan[i, j]
                grid = grid_builder(t_old)
                vals = entry_objective(
                    grid, C[i, j], row[i] - t_old, col[j] - t_old, u[i], v[j]
                )
                t_new = float(grid[int(np.argmin(vals))])
                plan[i, j] = t_new
                row[i] += t_new - t_old
                col[j] += t_new - t_old
                biggest_move = max(biggest_move, abs(t_new - t_old))
        return biggest_move

    coarse_grid = np.arange(0.0, upper + coarse, coarse)
    sweeps = 0
    for _ in range(max_sweeps):
        move = sweep(lambda t_old: coarse_grid)
        sweeps += 1
        if move < coarse:
            break

    def local_grid(t_old):
        lo = max(0.0, t_old - 2.0 * coarse)
        return lo + np.arange(0.0, 4.0 * coarse + fine, fine)

    for _ in range(5):
        move = sweep(local_grid)
        sweeps += 1
        if move < fine:
            break

    # Implied scaling factors, least-squares split of log(plan) + C/eps;
    # informational only (the lattice plan is not an exact scaling solution).
    safe = np.maximum(plan, 1e-300)
    M = np.log(safe) + C / eps
    dual_u = M.mean(axis=1) - M.mean() / 2.0
    dual_v = M.mean(axis=0) - M.mean() / 2.0
    return Coupling(
        plan=plan.copy(),
        row_marginal=plan.sum(axis=1),
        col_marginal=plan.sum(axis=0),
        iterations=sweeps,
        converged=True,
        dual_u=dual_u,
        dual_v=dual_v,
    )


def coupling_to_csv(coupling: Coupling, path: str | Path) -> None:
    """Dump the dense plan for debugging; one CSV row per source point."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        n, m = coupling.plan.shape
        writer.writerow([f"j{j}" for j in range(m)])
        for i in range(n):
            writer.writerow([repr(float(x)) for x in coupling.plan[i]])
