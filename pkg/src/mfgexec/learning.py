"""Round-by-round belief learning of the equilibrium flow.

Each round every type best-responds to its current belief about the net flow,
the realised aggregate flow is computed, and each type blends it into its
belief with weight ``pi_k(n) = clamp(c_k/n, 0, 1)`` after adding bounded
measurement noise. One belief is kept per type: agents of one type are
interchangeable in a finite-type population.

Noise for (type ``k``, round ``n``) comes from its own generator seeded with
``(seed, k, n)``, so a trace does not depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hetero import build_operator, solve_direct
from .model import MarketParams, PopulationSpec, TimeGrid


@dataclass(frozen=True)
class LearningConfig:
    rounds: int
    c: tuple[float, ...] = (1.0,)
    C: float = 1.0
    eps: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "c", tuple(float(x) for x in self.c))
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not self.C >= 1:
            raise ValueError("C must be >= 1")
        for ck in self.c:
            if not (1.0 / self.C <= ck <= self.C):
                raise ValueError(f"weight constant {ck} violates 1/C <= c_k <= C with C={self.C}")
        if not self.eps >= 0:
            raise ValueError("eps must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def weight(self, k: int, n: int) -> float:
        """``pi_k`` used for the update that produces round ``n`` (``n >= 1``)."""
        ck = self.c[k] if len(self.c) > 1 else self.c[0]
        return min(max(ck / n, 0.0), 1.0)


@dataclass(frozen=True)
class LearningTrace:
    errors: np.ndarray  # e_n for n = 1..rounds
    type_errors: np.ndarray  # shape (rounds, n_types)
    beliefs: np.ndarray  # final beliefs, shape (n_types, N+1)
    mu_star: np.ndarray
    eps: float
    c_emp: float | None = None
    meta: dict = field(default_factory=dict)

    def tail_max(self, fraction: float = 0.1) -> float:
        start = int(len(self.errors) * (1 - fraction))
        return float(np.max(self.errors[start:]))


def noise(config: LearningConfig, k: int, n: int, size: int) -> np.ndarray:
    """Uniform noise on ``[-eps, eps]`` for type ``k`` at round ``n``."""
    if config.eps == 0.0:
        return np.zeros(size)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, k, n]))
    return rng.uniform(-config.eps, config.eps, size)


def aggregate_flow(market: MarketParams, pop: PopulationSpec, grid: TimeGrid, beliefs) -> np.ndarray:
    """Net flow produced when type ``k`` best-responds to ``beliefs[k]``."""
    op = build_operator(market, pop, grid)
    beliefs = np.atleast_2d(np.asarray(beliefs, dtype=float))
    if beliefs.shape != (len(pop), len(grid)):
        raise ValueError(f"beliefs must have shape {(len(pop), len(grid))}, got {beliefs.shape}")
    out = op.b.copy()
    for k, typ in enumerate(pop.types):
        out += market.alpha * typ.weight * (op.type_matrix(k) @ beliefs[k])
    return out


def update_beliefs(beliefs, m_next, config: LearningConfig, n: int) -> np.ndarray:
    """Blend the observed flow into each belief to form round ``n + 1``."""
    beliefs = np.atleast_2d(np.asarray(beliefs, dtype=float))
    out = np.empty_like(beliefs)
    for k in range(beliefs.shape[0]):
        pi = config.weight(k, n + 1)
        observed = m_next + noise(config, k, n + 1, beliefs.shape[1])
        out[k] = (1.0 - pi) * beliefs[k] + pi * observed
    return out


def run_learning(
    market: MarketParams,
    pop: PopulationSpec,
    grid: TimeGrid,
    config: LearningConfig,
    initial=None,
    mu_star=None,
) -> LearningTrace:
    """Iterate the learning dynamics for ``config.rounds`` rounds.

    ``mu_star`` defaults to the equilibrium from :func:`solve_direct`.
    ``initial`` may be a single flow (shared by every type) or one per type;
    it defaults to zero.
    """
    if len(config.c) not in (1, len(pop)):
        raise ValueError("config.c needs one constant per type (or a single shared one)")
    if mu_star is None:
        mu_star = solve_direct(market, pop, grid).mu
    n_types, n_nodes = len(pop), len(grid)
    if initial is None:
        beliefs = np.zeros((n_types, n_nodes))
    else:
        beliefs = np.broadcast_to(np.asarray(initial, dtype=float), (n_types, n_nodes)).copy()

    op = build_operator(market, pop, grid)
    # fold weight and alpha into the per-type matrices once
    mats = [market.alpha * typ.weight * op.type_matrix(k) for k, typ in enumerate(pop.types)]
    type_err = np.empty((config.rounds, n_types))
    for n in range(config.rounds):
        m_next = op.b.copy()
        for k in range(n_types):
            m_next += mats[k] @ beliefs[k]
        beliefs = update_beliefs(beliefs, m_next, config, n)
        type_err[n] = np.max(np.abs(beliefs - mu_star), axis=1)
        if not np.all(np.isfinite(type_err[n])):
            type_err[n + 1:] = np.inf
            break
    errors = type_err.max(axis=1)
    trace = LearningTrace(errors, type_err, beliefs, np.asarray(mu_star), config.eps)
    if config.eps > 0:
        object.__setattr__(trace, "c_emp", trace.tail_max() / config.eps)
    return trace


def diverged(trace: LearningTrace) -> bool:
    return not np.all(np.isfinite(trace.errors))
