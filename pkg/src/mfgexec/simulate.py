"""Monte Carlo population following an equilibrium feedback.

Every agent of type ``k`` trades at ``nu_k(t, q) = (h1_k(t) - q*h2_k(t)) / (2 kappa)``
against the equilibrium flow ``mu``, which is held fixed (a single agent has
no effect on it). One path shares a price trajectory between all of its
agents:

    S_{i+1} = S_i + alpha * trapezoid(mu over the step) + sigma*sqrt(dt)*Z_i
    Q       RK4 on dQ/dt = nu(t, Q)
    X       trapezoid on dX/dt = -nu*(S + kappa*nu)
    J       = X_T + Q_T*(S_T - A*Q_T) - phi * trapezoid(Q**2)

Path ``p`` draws its initial inventories and then its price shocks from its
own generator seeded with ``(seed, p)``, so results do not depend on how paths
are chunked or scheduled, and a deviation test reuses the exact same draws.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .closed_form import HomogeneousSolution
from .hetero import EquilibriumFlow, recover_type_solution
from .model import MarketParams, PopulationSpec, TimeGrid
from .pde import thread_count

CHUNK = 1024
QUANTILES = (0.05, 0.5, 0.95)


@dataclass(frozen=True)
class Perturbation:
    """Deviation applied to one tagged agent: ``nu -> factor*nu + offset``."""

    factor: float = 1.0
    offset: float = 0.0

    @property
    def is_zero(self) -> bool:
        return self.factor == 1.0 and self.offset == 0.0

    def label(self) -> str:
        if self.offset == 0.0:
            return f"factor={self.factor:g}"
        if self.factor == 1.0:
            return f"offset={self.offset:+g}"
        return f"factor={self.factor:g},offset={self.offset:+g}"


@dataclass(frozen=True)
class SimConfig:
    paths: int
    agents_per_type: int = 1
    steps: int | None = None  # None: 10x the equilibrium grid
    seed: int = 0
    S0: float = 0.0
    report_points: int = 101
    store_paths: bool = False

    def violations(self) -> list[str]:
        out = []
        if self.paths < 1:
            out.append("paths must be >= 1")
        if self.agents_per_type < 1:
            out.append("agents_per_type must be >= 1")
        if self.steps is not None and self.steps < 1:
            out.append("steps must be >= 1")
        if self.report_points < 2:
            out.append("report_points must be >= 2")
        if not math.isfinite(self.S0):
            out.append("S0 must be finite")
        if not 0 <= self.seed < 2**64:
            out.append("seed must be a 64-bit unsigned integer")
        return out


@dataclass(frozen=True)
class Feedback:
    """Equilibrium feedback sampled on a time grid.

    ``h1`` and ``h2`` have shape ``(types, N+1)``; values between nodes are
    linearly interpolated unless the source is exact (see ``exact``).
    """

    market: MarketParams
    grid: TimeGrid
    h1: np.ndarray
    h2: np.ndarray
    mu: np.ndarray
    exact: tuple | None = None  # per-type closed-form solutions, when available

    def tabulate(self, times: np.ndarray):
        """``(h1, h2, mu)`` on arbitrary times."""
        if self.exact is not None:
            h1 = np.array([s.h1(times) for s in self.exact])
            h2 = np.array([s.h2(times) for s in self.exact])
            mu = self.exact[0].mu(times)
            return h1, h2, mu
        nodes = self.grid.nodes
        h1 = np.array([np.interp(times, nodes, row) for row in self.h1])
        h2 = np.array([np.interp(times, nodes, row) for row in self.h2])
        return h1, h2, np.interp(times, nodes, self.mu)

    def speed(self, k: int, t, q):
        h1, h2, _ = self.tabulate(np.atleast_1d(np.asarray(t, dtype=float)))
        out = (h1[k] - np.asarray(q) * h2[k]) / (2.0 * self.market.kappa)
        return out if np.ndim(t) else out[0]


def feedback_from_closed_form(sol: HomogeneousSolution, grid: TimeGrid, n_types: int = 1) -> Feedback:
    """Feedback shared by ``n_types`` types with identical preferences."""
    t = grid.nodes
    h1 = np.tile(sol.h1(t), (n_types, 1))
    h2 = np.tile(sol.h2(t), (n_types, 1))
    return Feedback(sol.market, grid, h1, h2, sol.mu(t), exact=(sol,) * n_types)


def feedback_from_flow(market: MarketParams, pop: PopulationSpec, flow: EquilibriumFlow) -> Feedback:
    """Feedback of a matched-penalty mixture (constant ``h2_k = 2 A_k``)."""
    h1 = np.array([recover_type_solution(market, pop, k, flow).h1 for k in range(len(pop))])
    h2 = np.array([np.full(len(flow.grid), 2.0 * typ.pref.A) for typ in pop.types])
    return Feedback(market, flow.grid, h1, h2, flow.mu.copy())


def mean_speed(fb: Feedback, pop: PopulationSpec, t, type_means) -> np.ndarray:
    """Weighted speed when every agent of type ``k`` holds ``type_means[k]``."""
    return sum(typ.weight * fb.speed(k, t, type_means[k]) for k, typ in enumerate(pop.types))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathEnsemble:
    """Per-path outputs plus optional full trajectories.

    Agents are laid out type-major: column ``k*agents_per_type + j``.
    """

    t_report: np.ndarray
    agent_type: np.ndarray
    J: np.ndarray  # (paths, agents)
    Q_report: np.ndarray  # (paths, agents, report_points)
    S_report: np.ndarray  # (paths, report_points)
    running: np.ndarray  # accumulated phi*int Q^2, (paths, agents)
    t: np.ndarray | None = None
    S: np.ndarray | None = None
    Q: np.ndarray | None = None
    X: np.ndarray | None = None


@dataclass(frozen=True)
class SimSummary:
    t: np.ndarray
    mean_J: np.ndarray  # per type
    se_J: np.ndarray
    Q_mean: np.ndarray  # (types, report_points)
    Q_quantiles: np.ndarray  # (types, len(QUANTILES), report_points)
    S_mean: np.ndarray
    samples: int
    ensemble: PathEnsemble = field(repr=False, default=None)


def _path_draws(seed: int, p: int, n_agents: int, steps: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, p]))
    return rng.standard_normal(n_agents), rng.standard_normal(steps)


def _report_index(steps: int, points: int) -> np.ndarray:
    return np.unique(np.round(np.linspace(0, steps, points)).astype(int))


def _integrate(market, pop, fb, config, steps, paths, perturb=None, tagged=None):
    """Advance one chunk of paths; ``tagged`` marks the agent column that deviates."""
    T, kappa, alpha, sigma = market.T, market.kappa, market.alpha, market.sigma
    dt = T / steps
    half = np.arange(2 * steps + 1) * (T / (2 * steps))
    half[-1] = T
    H1, H2, MU = fb.tabulate(half)

    agent_type = np.repeat(np.arange(len(pop)), config.agents_per_type)
    n_agents = agent_type.size
    mean0 = np.array([pop.types[k].pref.E0 for k in agent_type])
    sd0 = np.array([pop.types[k].spread for k in agent_type])
    phi = np.array([pop.types[k].pref.phi for k in agent_type])
    A = np.array([pop.types[k].pref.A for k in agent_type])

    P = len(paths)
    Q = np.empty((P, n_agents))
    Z = np.empty((P, steps))
    for i, p in enumerate(paths):
        z0, Z[i] = _path_draws(config.seed, p, n_agents, steps)
        Q[i] = mean0 + sd0 * z0

    fac = np.ones(n_agents)
    off = np.zeros(n_agents)
    if perturb is not None and tagged is not None:
        fac[tagged] = perturb.factor
        off[tagged] = perturb.offset

    def nu(j, q):
        return fac * (H1[agent_type, j] - q * H2[agent_type, j]) / (2.0 * kappa) + off

    rep = _report_index(steps, config.report_points)
    Q_rep = np.empty((P, n_agents, rep.size))
    S_rep = np.empty((P, rep.size))
    S = np.full(P, float(config.S0))
    X = np.zeros((P, n_agents))
    run = np.zeros((P, n_agents))
    if config.store_paths:
        S_all = np.empty((P, steps + 1))
        Q_all = np.empty((P, n_agents, steps + 1))
        X_all = np.empty((P, n_agents, steps + 1))
        S_all[:, 0], Q_all[:, :, 0], X_all[:, :, 0] = S, Q, X

    r = 0
    if rep[0] == 0:
        Q_rep[:, :, 0], S_rep[:, 0] = Q, S
        r = 1
    sq = math.sqrt(dt)
    v0 = nu(0, Q)
    for i in range(steps):
        j = 2 * i
        k1 = v0
        k2 = nu(j + 1, Q + 0.5 * dt * k1)
        k3 = nu(j + 1, Q + 0.5 * dt * k2)
        k4 = nu(j + 2, Q + dt * k3)
        Q_new = Q + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        S_new = S + alpha * 0.5 * dt * (MU[j] + MU[j + 2]) + sigma * sq * Z[:, i]
        v1 = nu(j + 2, Q_new)
        X = X - 0.5 * dt * (
            v0 * (S[:, None] + kappa * v0) + v1 * (S_new[:, None] + kappa * v1)
        )
        run = run + 0.5 * dt * phi * (Q * Q + Q_new * Q_new)
        Q, S, v0 = Q_new, S_new, v1
        if config.store_paths:
            S_all[:, i + 1], Q_all[:, :, i + 1], X_all[:, :, i + 1] = S, Q, X
        if r < rep.size and rep[r] == i + 1:
            Q_rep[:, :, r], S_rep[:, r] = Q, S
            r += 1

    J = X + Q * (S[:, None] - A * Q) - run
    out = dict(J=J, Q_report=Q_rep, S_report=S_rep, running=run)
    if config.store_paths:
        out.update(S=S_all, Q=Q_all, X=X_all)
    return out, agent_type, half[2 * rep]


def run_ensemble(market, pop, fb, config, perturb=None, tagged=None) -> PathEnsemble:
    """All paths of ``config``; ``tagged`` is the agent column that applies ``perturb``."""
    bad = config.violations()
    if bad:
        raise ValueError("; ".join(bad))
    steps = config.steps or 10 * fb.grid.N
    chunks = [range(s, min(s + CHUNK, config.paths)) for s in range(0, config.paths, CHUNK)]

    def work(paths):
        return _integrate(market, pop, fb, config, steps, paths, perturb, tagged)

    workers = min(len(chunks), thread_count())
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    agent_type, t_rep = results[0][1], results[0][2]
    keys = results[0][0].keys()
    merged = {k: np.concatenate([res[0][k] for res in results]) for k in keys}
    t_full = None
    if config.store_paths:
        t_full = np.arange(steps + 1) * market.T / steps
        t_full[-1] = market.T
    return PathEnsemble(t_rep, agent_type, t=t_full, **merged)


def summarize(pop: PopulationSpec, ens: PathEnsemble) -> SimSummary:
    n_types = len(pop)
    mean_J, se_J = np.empty(n_types), np.empty(n_types)
    Q_mean = np.empty((n_types, ens.t_report.size))
    Q_q = np.empty((n_types, len(QUANTILES), ens.t_report.size))
    for k in range(n_types):
        cols = ens.agent_type == k
        J = ens.J[:, cols].ravel()
        mean_J[k] = J.mean()
        se_J[k] = J.std(ddof=1) / math.sqrt(J.size) if J.size > 1 else math.nan
        Qk = ens.Q_report[:, cols, :].reshape(-1, ens.t_report.size)
        Q_mean[k] = Qk.mean(axis=0)
        Q_q[k] = np.quantile(Qk, QUANTILES, axis=0)
    return SimSummary(
        t=ens.t_report, mean_J=mean_J, se_J=se_J, Q_mean=Q_mean, Q_quantiles=Q_q,
        S_mean=ens.S_report.mean(axis=0), samples=ens.J.shape[0], ensemble=ens,
    )


def simulate(market: MarketParams, pop: PopulationSpec, fb: Feedback, config: SimConfig) -> SimSummary:
    """Run the population and summarise it per type."""
    return summarize(pop, run_ensemble(market, pop, fb, config))


def recompute_objective(pop: PopulationSpec, ens: PathEnsemble) -> np.ndarray:
    """Objective rebuilt from stored trajectories (requires ``store_paths``)."""
    if ens.Q is None:
        raise ValueError("trajectories were not stored; set store_paths=True")
    phi = np.array([pop.types[k].pref.phi for k in ens.agent_type])
    A = np.array([pop.types[k].pref.A for k in ens.agent_type])
    running = phi * np.trapezoid(ens.Q**2, ens.t, axis=-1)
    QT, XT, ST = ens.Q[..., -1], ens.X[..., -1], ens.S[:, -1:]
    return XT + QT * (ST - A * QT) - running


def expected_value(sol: HomogeneousSolution, S0: float, spread: float = 0.0, q0: float | None = None) -> float:
    """Mean objective of an agent starting at ``Gaussian(q0, spread)`` with no cash.

    ``q0`` defaults to the population mean ``sol.pref.E0``.
    """
    E0 = sol.pref.E0 if q0 is None else q0
    return float(S0 * E0 + sol.h0(0.0) + E0 * sol.h1(0.0) - 0.5 * (E0**2 + spread**2) * sol.h2(0.0))


@dataclass(frozen=True)
class DeviationReport:
    perturbation: Perturbation
    type_index: int
    mean_optimal: float
    mean_deviated: float
    mean_diff: float  # deviated - optimal
    se_diff: float
    paths: int

    @property
    def z(self) -> float:
        if self.se_diff == 0.0:
            return -math.inf if self.mean_diff < 0 else (math.inf if self.mean_diff > 0 else 0.0)
        return self.mean_diff / self.se_diff

    def worse(self, sigmas: float = 3.0) -> bool:
        """Deviation lowers the mean objective, one-sided at ``sigmas``."""
        return self.mean_diff < 0 and self.mean_diff + sigmas * self.se_diff < 0


def deviation_test(
    market: MarketParams,
    pop: PopulationSpec,
    fb: Feedback,
    config: SimConfig,
    perturbation: Perturbation,
    type_index: int = 0,
    base: PathEnsemble | None = None,
) -> DeviationReport:
    """Compare one tagged agent's objective with and without a deviation.

    Both runs use the same per-path draws, so the difference is paired and a
    zero perturbation gives exactly zero. ``base`` may pass in an undeviated
    ensemble already run with the same ``config``.
    """
    if not 0 <= type_index < len(pop):
        raise IndexError(f"type index {type_index} out of range for {len(pop)} types")
    tagged = type_index * config.agents_per_type
    if base is None:
        base = run_ensemble(market, pop, fb, config)
    dev = run_ensemble(market, pop, fb, config, perturbation, tagged)
    j0, j1 = base.J[:, tagged], dev.J[:, tagged]
    d = j1 - j0
    se = float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else 0.0
    return DeviationReport(
        perturbation, type_index, float(j0.mean()), float(j1.mean()), float(d.mean()), se, d.size
    )
