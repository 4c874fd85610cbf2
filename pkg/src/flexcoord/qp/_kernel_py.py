"""Primal active-set solver for the dispatch subproblem (NumPy fallback).

The Hessian of the canonical problem is H = 2*(M^T M + diag(w)) where M
maps variables to the per-timestep aggregate flexibility. Because the
columns of M partition by timestep, M D^-1 M^T is diagonal and H^-1 has a
closed Woodbury form, so every linear solve reduces to O(n) work plus a
dense Cholesky solve on the working-set Schur complement.

The working-set Schur complement S = A_W H^-1 A_W^T grows by one
bordered Cholesky row per added constraint; removals trigger a full
refactorization (they are rare). One step of iterative refinement is
applied to every Schur solve because H is ill-conditioned when the
tie-break regularization is small.

The compiled twin in _kernel_cy.pyx implements the same algorithm; both
must return the unique minimizer of the strictly convex problem, so they
agree to linear-algebra roundoff.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from .problem import KernelProblem

# Tolerances are relative to the data scale (1 + max |target|, bounds).
# The Woodbury split of H leaves ~1e-9 relative cancellation noise in EQP
# directions when the tie-break weight is small, so anything below the
# noise floor must not be mistaken for movement.
DIR_NOISE = 1e-9       # directional derivatives below this are noise
DEP_TOL = 1e-12        # relative pivot floor when bordering the Cholesky factor
STEP_NOISE = 1e-8      # |p| below this means the EQP is solved at x
MULT_TOL = 1e-9        # multiplier negativity threshold at optimality test
ENTRY_FEAS_TOL = 1e-7  # allowed infeasibility of the start point


class KernelError(RuntimeError):
    """Numerical failure or iteration-limit overrun inside the kernel."""


class _Woodbury:
    """Closed-form application of H^-1 for H = 2*(M^T M + diag(w))."""

    def __init__(self, prob: KernelProblem):
        self.ti = prob.ti
        self.mcoef = prob.mcoef
        self.inv2w = 0.5 / prob.w
        phi = np.bincount(
            prob.ti, weights=prob.mcoef ** 2 * self.inv2w, minlength=prob.n_steps
        )
        self.denom = 0.5 + phi

    def apply(self, v: np.ndarray) -> np.ndarray:
        u = v * self.inv2w
        z = np.bincount(self.ti, weights=self.mcoef * u, minlength=len(self.denom))
        z /= self.denom
        return u - self.mcoef * z[self.ti] * self.inv2w


def _chol_solve(L: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    y = solve_triangular(L, rhs, lower=True, check_finite=False)
    return solve_triangular(L.T, y, lower=False, check_finite=False)


def _cholupdate(F: np.ndarray, e: np.ndarray):
    """In-place rank-1 update: F <- chol(F F^T + e e^T), F lower."""
    k_max = F.shape[0]
    for k in range(k_max):
        r = np.hypot(F[k, k], e[k])
        c = r / F[k, k]
        s = e[k] / F[k, k]
        F[k, k] = r
        if k + 1 < k_max:
            F[k + 1:, k] = (F[k + 1:, k] + s * e[k + 1:]) / c
            e[k + 1:] = c * e[k + 1:] - s * F[k + 1:, k]


class _WorkingSet:
    """Active rows with bordered-Cholesky Schur complement.

    Buffers grow by doubling; adds border the factor in O(m^2), removals
    shift the trailing block and repair it with a rank-1 update.
    """

    def __init__(self, prob: KernelProblem, hinv: _Woodbury):
        self.prob = prob
        self.hinv = hinv
        self.cids: list[int] = []
        self.m = 0
        n = prob.n_vars
        cap = 64
        self._A = np.empty((cap, n))    # rows a_j
        self._HA = np.empty((cap, n))   # rows H^-1 a_j
        self._b = np.empty(cap)
        self._S = np.empty((cap, cap))
        self._L = np.empty((cap, cap))

    def __len__(self):
        return self.m

    @property
    def A(self):
        return self._A[: self.m]

    @property
    def b(self):
        return self._b[: self.m]

    @property
    def L(self):
        return self._L[: self.m, : self.m]

    @property
    def S(self):
        return self._S[: self.m, : self.m]

    def apply_HAT(self, nu: np.ndarray) -> np.ndarray:
        """H^-1 A^T nu."""
        return nu @ self._HA[: self.m]

    def _grow(self):
        cap = self._A.shape[0] * 2
        n = self._A.shape[1]
        m = self.m
        for name, shape in (("_A", (cap, n)), ("_HA", (cap, n)), ("_b", (cap,)),
                            ("_S", (cap, cap)), ("_L", (cap, cap))):
            old = getattr(self, name)
            new = np.empty(shape)
            if name in ("_A", "_HA"):
                new[:m] = old[:m]
            elif name == "_b":
                new[:m] = old[:m]
            else:
                new[:m, :m] = old[:m, :m]
            setattr(self, name, new)

    def try_add(self, cid: int) -> bool:
        """Add a constraint row; returns False if it is linearly dependent."""
        a, b = self.prob.constraint_row(cid)
        ha = self.hinv.apply(a)
        sigma = float(a @ ha)
        m = self.m
        if m == self._A.shape[0]:
            self._grow()
        if m == 0:
            if sigma <= 0:
                return False
            delta2 = sigma
            l = np.empty(0)
        else:
            s = self._A[:m] @ ha
            l = solve_triangular(self._L[:m, :m], s, lower=True, check_finite=False)
            delta2 = sigma - float(l @ l)
            if delta2 <= DEP_TOL * max(sigma, 1e-300):
                return False
        self.cids.append(cid)
        self._A[m] = a
        self._HA[m] = ha
        self._b[m] = b
        if m:
            self._S[m, :m] = s
            self._S[:m, m] = s
            self._L[m, :m] = l
        self._S[m, m] = sigma
        self._L[:m, m] = 0.0
        self._L[m, m] = np.sqrt(delta2)
        self.m = m + 1
        return True

    def remove(self, j: int):
        m = self.m
        self.cids.pop(j)
        k = m - j - 1  # trailing block size
        if k:
            F = self._L[j + 1: m, j + 1: m].copy()
            e = self._L[j + 1: m, j].copy()
            _cholupdate(F, e)
            self._L[j: m - 1, j: m - 1] = F
            self._L[j: m - 1, :j] = self._L[j + 1: m, :j]
        for buf in (self._A, self._HA):
            buf[j: m - 1] = buf[j + 1: m]
        self._b[j: m - 1] = self._b[j + 1: m]
        self._S[j: m - 1, :m] = self._S[j + 1: m, :m]
        self._S[:m - 1, j: m - 1] = self._S[:m - 1, j + 1: m]
        self.m = m - 1

    def solve_schur(self, rhs: np.ndarray) -> np.ndarray:
        m = self.m
        L = self._L[:m, :m]
        nu = _chol_solve(L, rhs)
        # one refinement pass; S is ill-conditioned for small w
        resid = rhs - self._S[:m, :m] @ nu
        nu += _chol_solve(L, resid)
        return nu


def solve_kernel(prob: KernelProblem, x0: np.ndarray | None = None,
                 max_iter: int | None = None):
    """Minimize the canonical problem starting from a feasible point.

    Returns (x, iterations). Raises KernelError on iteration-limit overrun
    or an infeasible start.
    """
    n = prob.n_vars
    if x0 is None:
        x = np.zeros(n)
    else:
        x = np.asarray(x0, dtype=np.float64).copy()
    slacks = prob.constraint_slacks(x)
    if np.min(slacks) < -ENTRY_FEAS_TOL:
        raise KernelError(
            f"start point infeasible by {-np.min(slacks):.3e}"
        )

    if max_iter is None:
        max_iter = 40 * n + 400

    finite_ub = prob.ub[np.isfinite(prob.ub)]
    data_scale = 1.0 + float(np.max(np.abs(prob.d), initial=0.0))
    if finite_ub.size:
        data_scale += float(np.max(np.abs(finite_ub)))
    dir_floor = DIR_NOISE * data_scale
    step_floor = STEP_NOISE * data_scale

    hinv = _Woodbury(prob)
    ws = _WorkingSet(prob, hinv)
    glin = -2.0 * (prob.mcoef * prob.d[prob.ti])  # linear objective term
    bland = False
    zero_steps = 0

    in_ws = np.zeros(prob.n_cons, dtype=bool)

    for it in range(1, max_iter + 1):
        grad = 2.0 * (prob.mcoef * prob.aggregate_flex(x)[prob.ti]
                      - prob.mcoef * prob.d[prob.ti] + prob.w * x)
        hq = hinv.apply(grad)
        if len(ws):
            rhs = -(ws.A @ hq)
            nu = ws.solve_schur(rhs)
            p = -(hq + ws.apply_HAT(nu))
            # refinement: push p back into the working-set null space
            r = ws.A @ p
            if np.max(np.abs(r)) > 1e-13 * (1.0 + np.max(np.abs(p))):
                nu += ws.solve_schur(r)
                p = -(hq + ws.apply_HAT(nu))
        else:
            nu = np.empty(0)
            p = -hq

        if float(np.max(np.abs(p), initial=0.0)) <= step_floor:
            # EQP solved at x: check multiplier signs
            if len(ws) == 0:
                return _snap(prob, ws, hinv, glin, x), it
            mult_scale = 1.0 + float(np.max(np.abs(grad)))
            neg = nu < -MULT_TOL * mult_scale
            if not np.any(neg):
                return _snap(prob, ws, hinv, glin, x), it
            if bland:
                negidx = np.flatnonzero(neg)
                j = int(negidx[np.argmin(np.asarray(ws.cids)[negidx])])
            else:
                j = int(np.argmin(nu))
            in_ws[ws.cids[j]] = False
            ws.remove(j)
            continue

        # ratio test over all inert catalogue rows; rows whose directional
        # derivative sits below the noise floor are not real blockers
        slacks = prob.constraint_slacks(x)
        derivs = prob.constraint_derivs(p)
        remaining = (~in_ws) & (derivs > dir_floor) & np.isfinite(slacks)
        alpha = 1.0
        while np.any(remaining):
            idx = np.flatnonzero(remaining)
            ratios = np.maximum(slacks[idx], 0.0) / derivs[idx]
            kmin = int(np.argmin(ratios))
            amin = float(ratios[kmin])
            if amin >= 1.0:
                break
            ties = idx[np.abs(ratios - amin) <= 1e-12 * (1.0 + amin)]
            if bland or len(ties) == 1:
                block = int(np.min(ties))
            else:
                block = int(ties[np.argmax(derivs[ties])])
            if ws.try_add(block):
                in_ws[block] = True
                alpha = amin
                break
            # dependent on the working set: implied, march through it
            remaining[block] = False

        if alpha > 0.0:
            x = x + alpha * p
            zero_steps = 0
            bland = False
        else:
            zero_steps += 1
            if zero_steps > 2 * (len(ws) + 10):
                bland = True
            if zero_steps > 10 * (prob.n_cons + 10):
                raise KernelError("active-set cycling detected")

    raise KernelError(f"iteration limit {max_iter} exceeded")


def _snap(prob: KernelProblem, ws: _WorkingSet, hinv: _Woodbury,
          glin: np.ndarray, x_iter: np.ndarray) -> np.ndarray:
    """Re-solve the EQP of the final working set directly from the data.

    Removes accumulated stepping drift: the result satisfies the working
    constraints and stationarity to factorization accuracy. Falls back to
    the iterated point if the direct solution is measurably infeasible.
    """
    if len(ws) == 0:
        x = -hinv.apply(glin)
    else:
        hg = hinv.apply(glin)
        rhs = -(ws.b + ws.A @ hg)
        nu = ws.solve_schur(rhs)
        x = -(hg + ws.apply_HAT(nu))
        r = ws.b - ws.A @ x
        if np.max(np.abs(r)) > 1e-14 * (1.0 + np.max(np.abs(ws.b))):
            nu -= ws.solve_schur(r)
            x = -(hg + ws.apply_HAT(nu))
    slacks = prob.constraint_slacks(x)
    feas_tol = 1e-9 * (1.0 + float(np.max(np.abs(x))))
    if np.min(slacks) < -feas_tol or prob.objective(x) > prob.objective(x_iter) + 1e-9 * (
        1.0 + prob.objective(x_iter)
    ):
        return x_iter
    return x
