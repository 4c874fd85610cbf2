"""Exhaustive verification oracle for tiny dispatch instances.

Enumerates every per-step net power on a uniform grid per unit, discards
state-of-charge infeasible sequences, and returns the best achievable
objective. One-sided powers are enumerated directly (net power, with the
charge or discharge efficiency applied by sign), so every enumerated point
is feasible for the exact mixed-integer formulation. The optimum over the
grid upper-bounds the true optimum; the gap shrinks with the grid pitch.

Independent of the active-set solver by construction; used to certify it.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .dispatch import DispatchProblem
from .model import ValidationError

__all__ = ["brute_force_oracle", "oracle_slack"]

MAX_UNITS = 2
MAX_STEPS = 3
MAX_LEVELS = 21


def _feasible_net_sequences(params, grid, levels: int) -> np.ndarray:
    """All SoC-feasible net-power sequences of one unit, shape (m, T)."""
    T = grid.n_steps
    axis = np.linspace(-params.p_max, params.p_max, levels)
    grids = np.meshgrid(*([axis] * T), indexing="ij")
    seqs = np.stack([g.reshape(-1) for g in grids], axis=1)  # (levels^T, T)
    # SoC increment per step: charging scaled by eta_chg, discharging by 1/eta_dch
    inc = np.where(
        seqs >= 0,
        seqs * params.eta_chg,
        seqs / params.eta_dch,
    ) * (grid.dt_hours / params.capacity)
    soc = params.soc_initial + np.cumsum(inc, axis=1)
    ok = np.all((soc >= -1e-12) & (soc <= 1.0 + 1e-12), axis=1)
    return seqs[ok]


def brute_force_oracle(problem: DispatchProblem, levels: int) -> float:
    """Best objective over the enumerated per-unit power grids."""
    grid = problem.grid
    units = problem.units
    if len(units) > MAX_UNITS:
        raise ValidationError(f"oracle supports at most {MAX_UNITS} units")
    if grid.n_steps > MAX_STEPS:
        raise ValidationError(f"oracle supports at most {MAX_STEPS} timesteps")
    if not (2 <= levels <= MAX_LEVELS):
        raise ValidationError(f"levels must be in [2, {MAX_LEVELS}]")
    if problem.coupling_constraints is not None:
        raise ValidationError("oracle does not support coupling constraints")

    d = problem.target_series()  # aggregate flexibility pulled toward
    # flexibility = -net power
    flex_sets = [-_feasible_net_sequences(u, grid, levels) for u in units]
    for fs, u in zip(flex_sets, units):
        if fs.shape[0] == 0:
            raise ValidationError(f"no feasible grid sequence for unit {u.id}")

    if len(units) == 1:
        resid = d[None, :] - flex_sets[0]
        return float(np.min(np.einsum("ij,ij->i", resid, resid)))

    # two units: nearest-neighbour search of (d - f1) against the f2 set
    targets = d[None, :] - flex_sets[0]
    tree = cKDTree(flex_sets[1])
    dist, _ = tree.query(targets, k=1)
    return float(np.min(dist) ** 2)


def oracle_slack(problem: DispatchProblem, levels: int) -> float:
    """Certified tolerance when comparing solve() against the oracle.

    Grid pitch enters squared because the solver sits at a stationary
    point; the remaining factor bounds the residual magnitude the squared
    error can amplify.
    """
    d = problem.target_series()
    p_max = max(u.p_max for u in problem.units)
    pitch = 2.0 * p_max / (levels - 1)
    residual_bound = float(np.max(np.abs(d))) + sum(u.p_max for u in problem.units)
    return problem.grid.n_steps * len(problem.units) * pitch ** 2 * residual_bound
