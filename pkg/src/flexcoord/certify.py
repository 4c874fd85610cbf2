"""Independent optimality certificates for dispatch solutions.

Certification reconstructs the active constraints at a candidate point and
checks stationarity with nonnegative multipliers by least squares. It never
touches the active-set machinery, so it can vouch for it.
"""

from __future__ import annotations

import numpy as np

from .qp.problem import KernelProblem

__all__ = ["kkt_residual", "certify_kkt"]


def kkt_residual(prob: KernelProblem, x: np.ndarray,
                 active_tol: float = 1e-7) -> dict:
    """Stationarity and feasibility residuals of a candidate minimizer.

    Returns a dict with the worst constraint violation, the stationarity
    residual after projecting the gradient onto active rows with
    sign-constrained multipliers, and the most negative multiplier.
    """
    slacks = prob.constraint_slacks(x)
    feas = float(-np.min(slacks))

    grad = 2.0 * (
        prob.mcoef * (prob.aggregate_flex(x) - prob.d)[prob.ti] + prob.w * x
    )
    scale = 1.0 + float(np.max(np.abs(grad)))
    active = np.flatnonzero(np.abs(slacks) <= active_tol * scale)
    if active.size == 0:
        return {
            "feasibility": feas,
            "stationarity": float(np.max(np.abs(grad))),
            "min_multiplier": 0.0,
        }
    from scipy.optimize import nnls

    rows = np.stack([prob.constraint_row(int(c))[0] for c in active])
    # grad + A^T mu = 0 with mu >= 0; nnls finds the best sign-feasible mu,
    # so a nonzero residual means the point is not stationary
    mu, _ = nnls(rows.T, -grad)
    resid = grad + rows.T @ mu
    return {
        "feasibility": feas,
        "stationarity": float(np.max(np.abs(resid))),
        "min_multiplier": float(np.min(mu)) if mu.size else 0.0,
    }


def certify_kkt(prob: KernelProblem, x: np.ndarray,
                feas_tol: float = 1e-6, stat_tol: float = 1e-5) -> bool:
    """True when x satisfies the KKT conditions within tolerances."""
    r = kkt_residual(prob, x)
    scale = 1.0 + float(np.max(np.abs(prob.d), initial=0.0))
    return r["feasibility"] <= feas_tol * scale and r["stationarity"] <= stat_tol * scale
