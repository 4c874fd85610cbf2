"""Canonical form of the convex dispatch subproblem.

Both kernel implementations minimize

    J(x) = sum_t (d[t] - sum_{i: ti[i]=t} mcoef[i]*x[i])^2 + sum_i w[i]*x[i]^2

subject to
    lb[i] <= x[i] <= ub[i]
    glo[g] <= prefix(g, k) <= ghi[g]      for every group g, k = 0..T-1
    sum_{i: ti[i]=t} ncoef[i]*x[i] <= cup[t]   where cup[t] is finite

with prefix(g, k) = sum of ecoef[i]*x[i] over variables of group g with
ti[i] <= k. Groups model the state-of-charge ladder of one storage unit
(prefix in SoC units relative to the initial state), coupling rows model a
cap on a node's summed net power.

The quadratic is strictly convex (w > 0), so the minimizer is unique.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class KernelProblem:
    n_steps: int
    ti: np.ndarray      # int32[n], timestep of each variable
    mcoef: np.ndarray   # f64[n], flexibility coefficient (0 = not tracked)
    w: np.ndarray       # f64[n], strictly positive diagonal regularization
    d: np.ndarray       # f64[T], tracking target
    lb: np.ndarray      # f64[n]
    ub: np.ndarray      # f64[n]
    gi: np.ndarray      # int32[n], ladder group id, -1 = none
    ecoef: np.ndarray   # f64[n], ladder (SoC) coefficient
    n_groups: int
    glo: np.ndarray     # f64[G], lower prefix bound per group
    ghi: np.ndarray     # f64[G], upper prefix bound per group
    ncoef: np.ndarray   # f64[n], net-power coefficient for coupling rows
    cup: np.ndarray     # f64[T], +inf disables a coupling row

    def __post_init__(self):
        n = self.ti.shape[0]
        for name in ("mcoef", "w", "lb", "ub", "gi", "ecoef", "ncoef"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ValueError(f"{name} has length {arr.shape[0]}, expected {n}")
        if self.d.shape[0] != self.n_steps or self.cup.shape[0] != self.n_steps:
            raise ValueError("d/cup length must equal n_steps")
        if np.any(self.w <= 0):
            raise ValueError("regularization weights must be strictly positive")

    @property
    def n_vars(self) -> int:
        return self.ti.shape[0]

    # Constraint catalogue layout: [0, n) upper box, [n, 2n) lower box,
    # then per (group, k) an upper and a lower ladder row, then one
    # coupling row per timestep. Rows with infinite bounds are inert.
    @property
    def n_cons(self) -> int:
        return 2 * self.n_vars + 2 * self.n_groups * self.n_steps + self.n_steps

    def objective(self, x: np.ndarray) -> float:
        resid = self.d - np.bincount(
            self.ti, weights=self.mcoef * x, minlength=self.n_steps
        )
        return float(resid @ resid + self.w @ (x * x))

    def aggregate_flex(self, x: np.ndarray) -> np.ndarray:
        return np.bincount(self.ti, weights=self.mcoef * x, minlength=self.n_steps)

    def prefixes(self, x: np.ndarray) -> np.ndarray:
        """Ladder prefix values, shape (G, T)."""
        mask = self.gi >= 0
        flat = self.gi[mask].astype(np.int64) * self.n_steps + self.ti[mask]
        per_step = np.bincount(
            flat, weights=self.ecoef[mask] * x[mask],
            minlength=self.n_groups * self.n_steps,
        ).reshape(self.n_groups, self.n_steps)
        return np.cumsum(per_step, axis=1)

    def coupling_sums(self, x: np.ndarray) -> np.ndarray:
        return np.bincount(self.ti, weights=self.ncoef * x, minlength=self.n_steps)

    def constraint_slacks(self, x: np.ndarray) -> np.ndarray:
        """Slack b - a.x for every catalogue row (inf where inert)."""
        n = self.n_vars
        out = np.empty(self.n_cons)
        out[:n] = self.ub - x
        out[n:2 * n] = x - self.lb
        pref = self.prefixes(x)
        ladder = np.empty((self.n_groups, self.n_steps, 2))
        ladder[:, :, 0] = self.ghi[:, None] - pref
        ladder[:, :, 1] = pref - self.glo[:, None]
        out[2 * n:2 * n + 2 * self.n_groups * self.n_steps] = ladder.reshape(-1)
        out[2 * n + 2 * self.n_groups * self.n_steps:] = self.cup - self.coupling_sums(x)
        return out

    def constraint_row(self, cid: int) -> tuple[np.ndarray, float]:
        """Dense row (a, b) of catalogue constraint ``a.x <= b``."""
        n = self.n_vars
        a = np.zeros(n)
        if cid < n:
            a[cid] = 1.0
            return a, float(self.ub[cid])
        if cid < 2 * n:
            i = cid - n
            a[i] = -1.0
            return a, float(-self.lb[i])
        cid -= 2 * n
        n_ladder = 2 * self.n_groups * self.n_steps
        if cid < n_ladder:
            g, rem = divmod(cid, 2 * self.n_steps)
            k, side = divmod(rem, 2)
            mask = (self.gi == g) & (self.ti <= k)
            if side == 0:
                a[mask] = self.ecoef[mask]
                return a, float(self.ghi[g])
            a[mask] = -self.ecoef[mask]
            return a, float(-self.glo[g])
        t = cid - n_ladder
        mask = self.ti == t
        a[mask] = self.ncoef[mask]
        return a, float(self.cup[t])

    def constraint_derivs(self, p: np.ndarray) -> np.ndarray:
        """Directional derivative a.p for every catalogue row."""
        n = self.n_vars
        out = np.empty(self.n_cons)
        out[:n] = p
        out[n:2 * n] = -p
        pref = self.prefixes(p)
        ladder = np.empty((self.n_groups, self.n_steps, 2))
        ladder[:, :, 0] = pref
        ladder[:, :, 1] = -pref
        out[2 * n:2 * n + 2 * self.n_groups * self.n_steps] = ladder.reshape(-1)
        out[2 * n + 2 * self.n_groups * self.n_steps:] = self.coupling_sums(p)
        return out
