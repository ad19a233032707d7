"""Equilibrium flow for a finite mixture of preference types.

With ``A_k = sqrt(phi_k*kappa)`` every type has a constant ``h2 = 2*A_k`` and
``theta_k = A_k/kappa``. Its ``h1`` and mean inventory are then explicit
integrals of the net flow ``mu``:

    h1_k(t) = alpha * int_t^T exp(theta_k (t-s)) mu(s) ds
    E_k(t)  = exp(-theta_k t) E0_k
              + alpha/(2 kappa) * int_0^t dtau exp(theta_k (tau-t)) int_tau^T exp(theta_k (tau-s)) mu(s) ds

and consistency ``mu = sum_k w_k (h1_k/(2 kappa) - theta_k E_k)`` becomes the
affine fixed-point problem ``mu = b + alpha*K mu``. The integrals are
evaluated on the shared time grid with a product trapezoid rule (``mu``
interpolated linearly, exponential weights integrated exactly), so ``K`` is a
dense ``(N+1) x (N+1)`` matrix assembled once per scenario.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, IllConditionedError
from .model import MarketParams, PopulationSpec, TimeGrid, require_matched

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10_000
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class TypeKernel:
    """Quadrature matrices for one preference type.

    ``tail @ mu`` samples ``int_t^T exp(theta (t-s)) mu(s) ds`` and
    ``nested @ mu`` samples the double integral appearing in ``E_k``.
    """

    theta: float
    tail: np.ndarray
    nested: np.ndarray


@dataclass(frozen=True)
class FlowOperator:
    """The affine map ``mu -> b + alpha*K mu`` on a fixed grid."""

    market: MarketParams
    pop: PopulationSpec
    grid: TimeGrid
    b: np.ndarray
    K: np.ndarray
    kernels: tuple[TypeKernel, ...]

    def __call__(self, mu: np.ndarray) -> np.ndarray:
        return self.b + self.market.alpha * (self.K @ mu)

    def type_matrix(self, k: int) -> np.ndarray:
        """Contribution of type ``k`` beliefs to ``K`` (unweighted)."""
        ker = self.kernels[k]
        return (ker.tail - ker.theta * ker.nested) / (2.0 * self.market.kappa)


def _exp_weights(theta: float, h: float) -> tuple[float, float]:
    """``int_0^h exp(-theta x) dx`` and ``(1/h) int_0^h x exp(-theta x) dx``."""
    z = theta * h
    if z < 1e-3:
        return h * (1 - z / 2 + z * z / 6 - z**3 / 24), h * (0.5 - z / 3 + z * z / 8 - z**3 / 30)
    return -np.expm1(-z) / theta, h * (-np.expm1(-z) - z * np.exp(-z)) / (z * z)


def _type_kernel(theta: float, grid: TimeGrid) -> TypeKernel:
    # Product trapezoid: mu (and the inner integral) linear between nodes, the
    # exponential factor integrated exactly. Reduces to plain trapezoid at theta = 0.
    t = grid.nodes
    h = grid.dt
    n = len(t)
    i0, i1 = _exp_weights(theta, h)
    upper = np.triu(np.ones((n, n), dtype=bool))
    decay = np.exp(np.where(upper, theta * (t[:, None] - t[None, :]), -np.inf))
    tail = np.zeros((n, n))
    tail[:, :-1] += (i0 - i1) * decay[:, :-1]  # node j as left end of [t_j, t_j+1]
    tail[:, 1:] += i1 * decay[:, :-1]  # node j as right end of [t_j-1, t_j]

    step = np.exp(-theta * h)
    nested = np.zeros_like(tail)
    for i in range(1, n):
        nested[i] = step * nested[i - 1] + (i0 - i1) * tail[i] + i1 * tail[i - 1]
    return TypeKernel(theta=theta, tail=tail, nested=nested)


@lru_cache(maxsize=8)
def build_operator(market: MarketParams, pop: PopulationSpec, grid: TimeGrid) -> FlowOperator:
    require_matched(market, pop)
    t = grid.nodes
    kappa = market.kappa
    b = np.zeros(len(t))
    K = np.zeros((len(t), len(t)))
    kernels = []
    for typ in pop.types:
        theta = typ.pref.A / kappa
        ker = _type_kernel(theta, grid)
        kernels.append(ker)
        b -= typ.weight * theta * np.exp(-theta * t) * typ.pref.E0
        K += typ.weight * (ker.tail - theta * ker.nested)
    K /= 2.0 * kappa
    for arr in (b, K):
        arr.setflags(write=False)
    return FlowOperator(market, pop, grid, b, K, tuple(kernels))


def apply_phi_alpha(market: MarketParams, pop: PopulationSpec, grid: TimeGrid, mu_in) -> np.ndarray:
    """One application of the best-response aggregation map."""
    return build_operator(market, pop, grid)(np.asarray(mu_in, dtype=float))


@dataclass(frozen=True)
class EquilibriumFlow:
    grid: TimeGrid
    mu: np.ndarray
    method: str
    iterations: int
    residual: float
    history: tuple[float, ...] = ()

    def at(self, t):
        return np.interp(t, self.grid.nodes, self.mu)


def solve_picard(
    market: MarketParams,
    pop: PopulationSpec,
    grid: TimeGrid,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    damping: float = 1.0,
) -> EquilibriumFlow:
    """Damped Banach iteration from ``mu = 0``.

    Stops as soon as a proposed update moves no node by more than ``tol``;
    ``iterations`` counts the updates performed before that.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    op = build_operator(market, pop, grid)
    mu = np.zeros(len(grid))
    history = []
    for it in range(max_iter + 1):
        step = damping * (op(mu) - mu)
        change = float(np.max(np.abs(step)))
        history.append(change)
        mu = mu + step
        if not np.isfinite(change):
            break
        if change <= tol:
            return EquilibriumFlow(grid, mu, "picard", it, change, tuple(history))
    raise ConvergenceError(
        f"Picard iteration did not reach tol={tol:g} in {max_iter} iterations "
        f"(last update {history[-1]:.3g}); |alpha|={abs(market.alpha):g} may be outside "
        "the contraction regime, try damping < 1 or solve_direct",
        history,
    )


def solve_direct(market: MarketParams, pop: PopulationSpec, grid: TimeGrid) -> EquilibriumFlow:
    """Solve ``(I - alpha K) mu = b`` with a dense LU factorisation."""
    op = build_operator(market, pop, grid)
    M = np.eye(len(grid)) - market.alpha * op.K
    lu, piv = scipy.linalg.lu_factor(M)
    anorm = np.max(np.sum(np.abs(M), axis=0))
    rcond, info = scipy.linalg.lapack.dgecon(lu, anorm, norm="1")
    if info != 0 or not rcond > 1.0 / MAX_CONDITION:
        raise IllConditionedError(
            f"I - alpha*K is singular or ill-conditioned (rcond={rcond:.3g}); "
            f"|alpha|={abs(market.alpha):g} is likely outside the well-posed regime"
        )
    mu = scipy.linalg.lu_solve((lu, piv), op.b)
    residual = float(np.max(np.abs(op(mu) - mu)))
    return EquilibriumFlow(grid, mu, "direct", 1, residual)


@dataclass(frozen=True)
class TypeSolution:
    k: int
    theta: float
    h1: np.ndarray
    E: np.ndarray


def recover_type_solution(
    market: MarketParams, pop: PopulationSpec, k: int, flow: EquilibriumFlow
) -> TypeSolution:
    """Per-type ``h1`` and mean inventory implied by an equilibrium flow."""
    if not 0 <= k < len(pop):
        raise IndexError(f"type index {k} out of range for {len(pop)} types")
    op = build_operator(market, pop, flow.grid)
    ker = op.kernels[k]
    t = flow.grid.nodes
    alpha, kappa = market.alpha, market.kappa
    h1 = alpha * (ker.tail @ flow.mu)
    E = np.exp(-ker.theta * t) * pop.types[k].pref.E0 + alpha / (2 * kappa) * (ker.nested @ flow.mu)
    return TypeSolution(k=k, theta=ker.theta, h1=h1, E=E)


def estimate_contraction(market: MarketParams, pop: PopulationSpec, grid: TimeGrid) -> float:
    """``|alpha| * ||K||_inf``; below 1 it certifies undamped Picard convergence."""
    op = build_operator(market, pop, grid)
    return abs(market.alpha) * float(np.max(np.sum(np.abs(op.K), axis=1)))
