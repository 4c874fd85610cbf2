"""Domain types and storage physics.

Conventions used throughout the package:

- Power in MW, energy in MWh, time in hours.
- ``p_net = p_chg - p_dch`` is the power drawn from the grid by a unit
  (charging positive).  Delivered flexibility is the negated net power,
  ``p_flex = p_dch - p_chg``, i.e. positive flexibility injects power.
- A storage unit's baseline forecast is identically zero, so the power
  it actually shows equals minus its delivered flexibility.
- State of charge is dimensionless in [0, 1], relative to capacity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "TimeGrid",
    "EssParams",
    "FpuLimits",
    "Schedule",
    "ValidationError",
    "timeseries",
    "validate_params",
    "soc_propagate",
    "check_feasibility",
    "pte_ratio",
    "apply_flexibility",
]

#: Absolute feasibility tolerance on powers (MW) and SoC (dimensionless).
FEASIBILITY_TOL = 1e-6


class ValidationError(ValueError):
    """Raised when input data violates a documented invariant."""


@dataclass(frozen=True)
class TimeGrid:
    """Equidistant dispatch horizon: ``n_steps`` intervals of ``dt_hours``."""

    n_steps: int = 96
    dt_hours: float = 0.25

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValidationError(f"n_steps must be >= 1, got {self.n_steps}")
        if not (self.dt_hours > 0 and np.isfinite(self.dt_hours)):
            raise ValidationError(f"dt_hours must be > 0, got {self.dt_hours}")

    @property
    def horizon_hours(self) -> float:
        return self.n_steps * self.dt_hours

    def hours(self) -> np.ndarray:
        """Interval start times in hours, length n_steps."""
        return np.arange(self.n_steps) * self.dt_hours


@dataclass(frozen=True)
class EssParams:
    """Physical description of one storage unit.

    p_max is the symmetric charge/discharge power limit in MW, capacity is
    in MWh, efficiencies are per-direction in (0, 1], soc_initial in [0, 1].
    """

    id: str
    p_max: float
    capacity: float
    eta_chg: float = 1.0
    eta_dch: float = 1.0
    soc_initial: float = 0.5

    def violations(self) -> list[str]:
        out = []
        if not (self.p_max >= 0 and np.isfinite(self.p_max)):
            out.append(f"p_max must be >= 0 and finite, got {self.p_max}")
        if not (self.capacity > 0 and np.isfinite(self.capacity)):
            out.append(f"capacity must be > 0, got {self.capacity}")
        if not (0 < self.eta_chg <= 1):
            out.append(f"eta_chg must be in (0, 1], got {self.eta_chg}")
        if not (0 < self.eta_dch <= 1):
            out.append(f"eta_dch must be in (0, 1], got {self.eta_dch}")
        if not (0 <= self.soc_initial <= 1):
            out.append(f"soc_initial out of [0, 1]: {self.soc_initial}")
        return out


@dataclass(frozen=True)
class FpuLimits:
    """Active-power band of a generic flexibility-providing unit, MW."""

    p_min: float
    p_max: float

    def __post_init__(self):
        if self.p_min > self.p_max:
            raise ValidationError(
                f"p_min ({self.p_min}) exceeds p_max ({self.p_max})"
            )

    @classmethod
    def from_ess(cls, params: EssParams) -> "FpuLimits":
        # Storage limits are symmetric around zero.
        return cls(p_min=-params.p_max, p_max=params.p_max)


def timeseries(values, grid: TimeGrid) -> np.ndarray:
    """Validate and return a power timeseries as a float64 array [MW]."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != grid.n_steps:
        raise ValidationError(
            f"timeseries length {arr.shape} does not match grid n_steps={grid.n_steps}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValidationError("timeseries contains non-finite values")
    return arr


@dataclass
class Schedule:
    """Per-timestep dispatch of one (possibly virtual) storage unit.

    soc has length n_steps + 1 and includes the initial state; p_net is
    p_chg - p_dch; x_chg/x_dch flag the active direction per step.
    """

    p_chg: np.ndarray
    p_dch: np.ndarray
    x_chg: np.ndarray
    x_dch: np.ndarray
    p_net: np.ndarray
    soc: np.ndarray

    @classmethod
    def zeros(cls, params: EssParams, grid: TimeGrid) -> "Schedule":
        n = grid.n_steps
        z = np.zeros(n)
        soc = np.full(n + 1, params.soc_initial)
        return cls(z.copy(), z.copy(), z.astype(np.int8), z.astype(np.int8), z.copy(), soc)

    @classmethod
    def from_powers(cls, params: EssParams, grid: TimeGrid,
                    p_chg, p_dch) -> "Schedule":
        """Assemble a schedule from charge/discharge powers; derives binaries,
        net power, and the SoC trajectory (unclamped)."""
        p_chg = timeseries(p_chg, grid)
        p_dch = timeseries(p_dch, grid)
        soc = soc_propagate(params, grid, p_chg, p_dch)
        return cls(
            p_chg=p_chg,
            p_dch=p_dch,
            x_chg=(p_chg > 0).astype(np.int8),
            x_dch=(p_dch > 0).astype(np.int8),
            p_net=p_chg - p_dch,
            soc=soc,
        )

    def flex(self) -> np.ndarray:
        """Delivered flexibility series: positive when injecting power."""
        return -self.p_net

    def energy(self, capacity: float) -> np.ndarray:
        """Absolute energy content trajectory [MWh], length n_steps + 1."""
        return self.soc * capacity


@dataclass(frozen=True)
class Violation:
    """One violated schedule constraint, for reporting."""

    timestep: int
    constraint: str
    magnitude: float

    def __str__(self):
        return f"t={self.timestep}: {self.constraint} violated by {self.magnitude:.3e}"


def validate_params(params: EssParams) -> list[str]:
    """Return the list of violated parameter invariants (empty if valid)."""
    return params.violations()


def soc_propagate(params: EssParams, grid: TimeGrid,
                  p_chg, p_dch) -> np.ndarray:
    """Propagate the state of charge through the horizon.

    Returns n_steps + 1 values starting at soc_initial, applying

        soc[i] = soc[i-1] + (p_chg[i-1]*eta_chg - p_dch[i-1]/eta_dch) * dt / c

    Values are NOT clamped to [0, 1]; out-of-range values are returned so
    that feasibility checking can report them.
    """
    p_chg = timeseries(p_chg, grid)
    p_dch = timeseries(p_dch, grid)
    inc = (p_chg * params.eta_chg - p_dch / params.eta_dch) * (
        grid.dt_hours / params.capacity
    )
    soc = np.empty(grid.n_steps + 1)
    soc[0] = params.soc_initial
    np.cumsum(inc, out=soc[1:])
    soc[1:] += params.soc_initial
    return soc


def check_feasibility(params: EssParams, grid: TimeGrid, schedule: Schedule,
                      tol: float = FEASIBILITY_TOL) -> list[Violation]:
    """Check all schedule invariants within an absolute tolerance.

    Returns an empty list iff the schedule is feasible; violations carry
    the timestep, the constraint name, and the violation magnitude.
    """
    n = grid.n_steps
    for name, arr, length in (
        ("p_chg", schedule.p_chg, n),
        ("p_dch", schedule.p_dch, n),
        ("x_chg", schedule.x_chg, n),
        ("x_dch", schedule.x_dch, n),
        ("p_net", schedule.p_net, n),
        ("soc", schedule.soc, n + 1),
    ):
        if len(arr) != length:
            raise ValidationError(f"schedule field {name} has length {len(arr)}, expected {length}")

    out: list[Violation] = []

    def report(mask, name, magnitude):
        for t in np.flatnonzero(mask):
            out.append(Violation(int(t), name, float(magnitude[t])))

    x_chg = np.asarray(schedule.x_chg, dtype=float)
    x_dch = np.asarray(schedule.x_dch, dtype=float)

    m = -schedule.p_chg
    report(m > tol, "p_chg >= 0", m)
    m = schedule.p_chg - x_chg * params.p_max
    report(m > tol, "p_chg <= x_chg * p_max", m)
    m = -schedule.p_dch
    report(m > tol, "p_dch >= 0", m)
    m = schedule.p_dch - x_dch * params.p_max
    report(m > tol, "p_dch <= x_dch * p_max", m)
    m = x_chg + x_dch - 1.0
    report(m > tol, "x_chg + x_dch <= 1", m)
    m = np.abs(schedule.p_net - (schedule.p_chg - schedule.p_dch))
    report(m > tol, "p_net = p_chg - p_dch", m)

    expected_soc = soc_propagate(params, grid, schedule.p_chg, schedule.p_dch)
    m = np.abs(schedule.soc - expected_soc)
    for i in np.flatnonzero(m > tol):
        out.append(Violation(int(i), "soc continuity", float(m[i])))
    m = -schedule.soc
    for i in np.flatnonzero(m > tol):
        out.append(Violation(int(i), "soc >= 0", float(m[i])))
    m = schedule.soc - 1.0
    for i in np.flatnonzero(m > tol):
        out.append(Violation(int(i), "soc <= 1", float(m[i])))
    return out


def pte_ratio(params: EssParams) -> float:
    """Power-to-energy ratio p_max / capacity [1/h].

    The reciprocal of the time the unit needs for a full charge or
    discharge at rated power.
    """
    if not params.capacity > 0:
        raise ValidationError(f"capacity must be > 0, got {params.capacity}")
    return params.p_max / params.capacity


def apply_flexibility(p_forecast, p_flex) -> np.ndarray:
    """Resulting power after flexibility activation: forecast minus flex."""
    p_forecast = np.asarray(p_forecast, dtype=np.float64)
    p_flex = np.asarray(p_flex, dtype=np.float64)
    if p_forecast.shape != p_flex.shape:
        raise ValidationError(
            f"length mismatch: forecast {p_forecast.shape} vs flex {p_flex.shape}"
        )
    return p_forecast - p_flex
