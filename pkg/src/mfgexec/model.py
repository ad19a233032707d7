"""Domain types shared by every solver.

Units are abstract throughout: inventories in shares, prices in currency per
share, time in whatever unit the horizon ``T`` is expressed in. Nothing here
converts between unit systems.

The dataclasses do not raise on construction so that :func:`validate_scenario`
can report every problem at once. Solvers call :func:`require_valid` (or the
narrower checks) before doing any work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ScenarioError

WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True)
class MarketParams:
    """Market-wide constants.

    alpha : permanent impact per unit of net flow (any sign)
    kappa : temporary impact per unit of own trading speed (> 0)
    sigma : price volatility (>= 0)
    T     : horizon (> 0)
    """

    alpha: float
    kappa: float
    sigma: float = 0.0
    T: float = 1.0

    def violations(self) -> list[str]:
        out = []
        for name in ("alpha", "kappa", "sigma", "T"):
            if not math.isfinite(getattr(self, name)):
                out.append(f"{name} must be finite")
        if not self.kappa > 0:
            out.append("kappa must be strictly positive")
        if not self.T > 0:
            out.append("T must be strictly positive")
        if not self.sigma >= 0:
            out.append("sigma must be nonnegative")
        return out


@dataclass(frozen=True)
class Preference:
    """Risk preferences of one agent type and its initial mean inventory."""

    phi: float
    A: float
    E0: float = 0.0

    def violations(self) -> list[str]:
        out = []
        for name in ("phi", "A", "E0"):
            if not math.isfinite(getattr(self, name)):
                out.append(f"{name} must be finite")
        if not self.phi >= 0:
            out.append("phi must be nonnegative")
        if not self.A >= 0:
            out.append("A must be nonnegative")
        return out

    def matched_penalty(self, kappa: float) -> float:
        """Terminal penalty ``sqrt(phi * kappa)`` that keeps ``h2`` constant."""
        return math.sqrt(self.phi * kappa)

    def is_matched(self, kappa: float, rtol: float = 1e-9) -> bool:
        target = self.matched_penalty(kappa)
        return abs(self.A - target) <= rtol * max(1.0, target)


@dataclass(frozen=True)
class AgentType:
    """A population component: weight, preferences, initial inventory spread.

    ``spread`` is the standard deviation of the Gaussian initial inventory
    distribution; 0 means every agent of the type starts at ``pref.E0``.
    """

    weight: float
    pref: Preference
    spread: float = 0.0


@dataclass(frozen=True)
class PopulationSpec:
    types: tuple[AgentType, ...]

    def __post_init__(self):
        object.__setattr__(self, "types", tuple(self.types))

    @classmethod
    def single(cls, pref: Preference, spread: float = 0.0) -> "PopulationSpec":
        return cls((AgentType(1.0, pref, spread),))

    @property
    def weights(self) -> np.ndarray:
        return np.array([t.weight for t in self.types], dtype=float)

    @property
    def prefs(self) -> list[Preference]:
        return [t.pref for t in self.types]

    def __len__(self) -> int:
        return len(self.types)

    def violations(self) -> list[str]:
        if not self.types:
            return ["population must contain at least one type"]
        out = []
        for k, t in enumerate(self.types):
            if not (math.isfinite(t.weight) and t.weight > 0):
                out.append(f"type {k}: weight must be strictly positive")
            if not (math.isfinite(t.spread) and t.spread >= 0):
                out.append(f"type {k}: spread must be nonnegative")
            out.extend(f"type {k}: {v}" for v in t.pref.violations())
        total = float(sum(t.weight for t in self.types))
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            out.append(f"weights must sum to 1 (got {total!r})")
        return out


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i*T/N`` for ``i = 0..N``."""

    T: float
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ScenarioError(f"grid needs N >= 2 steps, got {self.N!r}")
        if not (math.isfinite(self.T) and self.T > 0):
            raise ScenarioError(f"grid horizon must be positive, got {self.T!r}")
        object.__setattr__(self, "N", int(self.N))

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        # i*T/N rather than a running sum, so long grids do not drift
        t = np.arange(self.N + 1) * self.T / self.N
        t[-1] = self.T
        return t

    def __len__(self) -> int:
        return self.N + 1


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    hetero_eligible: list[bool] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def lines(self) -> list[str]:
        return [f"violation: {v}" for v in self.violations] + [f"note: {n}" for n in self.notes]


def validate_scenario(market: MarketParams, pop: PopulationSpec) -> ValidationReport:
    """Collect every parameter problem without raising.

    The heterogeneous-solver requirement ``A_k = sqrt(phi_k*kappa)`` is recorded
    per type in ``hetero_eligible`` and in ``notes``; it is never a violation.
    """
    report = ValidationReport()
    report.violations.extend(market.violations())
    report.violations.extend(pop.violations())
    kappa_ok = math.isfinite(market.kappa) and market.kappa > 0
    for k, t in enumerate(pop.types):
        p = t.pref
        if not (kappa_ok and p.phi >= 0 and math.isfinite(p.phi)):
            report.hetero_eligible.append(False)
            continue
        target = p.matched_penalty(market.kappa)
        eligible = p.is_matched(market.kappa)
        report.hetero_eligible.append(eligible)
        if eligible:
            report.notes.append(f"type {k}: A = sqrt(kappa*phi) = {target:.6g}, hetero-eligible")
        else:
            report.notes.append(
                f"type {k}: A = {p.A:.6g} != sqrt(kappa*phi) = {target:.6g}, hetero-ineligible"
            )
    return report


def require_valid(market: MarketParams, pop: PopulationSpec | None = None) -> None:
    problems = market.violations()
    if pop is not None:
        problems += pop.violations()
    if problems:
        raise ScenarioError("; ".join(problems))


def require_matched(market: MarketParams, pop: PopulationSpec) -> None:
    """Raise unless every type satisfies ``A = sqrt(phi*kappa)``."""
    require_valid(market, pop)
    for k, t in enumerate(pop.types):
        if not t.pref.is_matched(market.kappa):
            raise ScenarioError(
                f"type {k}: heterogeneous solvers need A = sqrt(phi*kappa) = "
                f"{t.pref.matched_penalty(market.kappa):.12g}, got A = {t.pref.A:.12g}"
            )


def check_time(t, T: float):
    """Return ``t`` as float/array after checking ``0 <= t <= T``."""
    arr = np.asarray(t, dtype=float)
    slack = 1e-12 * T
    if np.any(~np.isfinite(arr)) or np.any(arr < -slack) or np.any(arr > T + slack):
        raise ValueError(f"time outside [0, {T}]: {t!r}")
    arr = np.clip(arr, 0.0, T)
    return float(arr) if arr.ndim == 0 else arr


def linear_interp(grid: TimeGrid, samples: Sequence[float], t):
    """Piecewise-linear interpolation of grid samples; exact at the nodes."""
    y = np.asarray(samples, dtype=float)
    if y.shape[-1] != len(grid):
        raise ValueError(f"expected {len(grid)} samples, got {y.shape[-1]}")
    t = check_time(t, grid.T)
    return np.interp(t, grid.nodes, y)
