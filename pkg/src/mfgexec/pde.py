"""Grid solver for the coupled value/density system on (t, q).

For each type the reduced value function solves, backward from
``v(T, q) = -A q**2``,

    -alpha * q * mu(t) = dv/dt - phi * q**2 + (dv/dq)**2 / (4 kappa)

and its inventory density is transported forward by the optimal speed
``(dv/dq) / (2 kappa)``. The net flow ``mu`` closes the loop and is found by
damped fixed-point iteration.

Schemes: explicit local Lax-Friedrichs for the Hamilton-Jacobi equation,
first-order conservative upwind for transport, no-flux q boundaries. Both
marches sub-step each output interval so that ``ds <= cfl * dq * 2 kappa / max|dv/dq|``;
an interval that would need more than ``MAX_SUBSTEPS`` sub-steps is a CFL error.
"""

from __future__ import annotations

import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np
from numba import njit

from .closed_form import solve_homogeneous
from .errors import BoundaryLeakError, CFLError, ConvergenceError
from .model import MarketParams, PopulationSpec, Preference, require_valid

log = logging.getLogger(__name__)

CFL = 0.5
GRAD_SLACK = 1.25  # sub-steps are sized for this multiple of the observed max gradient
MAX_SUBSTEPS = 5000  # per output interval; beyond this the time grid is too coarse
MASS_TOL = 1e-6
LEAK_TOL = 1e-4
THREADS_ENV = "MFGEXEC_THREADS"


def thread_count() -> int:
    """Worker threads for per-type solves; ``MFGEXEC_THREADS`` overrides the CPU count."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            log.warning("ignoring non-integer %s=%r", THREADS_ENV, raw)
    return os.cpu_count() or 1


@dataclass(frozen=True)
class PdeGrid:
    T: float
    n_t: int
    q_min: float
    q_max: float
    n_q: int

    def __post_init__(self):
        if self.n_t < 2 or self.n_q < 4:
            raise ValueError("need n_t >= 2 and n_q >= 4")
        if not self.q_min < self.q_max:
            raise ValueError("q_min must be below q_max")

    @property
    def t(self) -> np.ndarray:
        t = np.arange(self.n_t + 1) * self.T / self.n_t
        t[-1] = self.T
        return t

    @property
    def q(self) -> np.ndarray:
        return self.q_min + np.arange(self.n_q + 1) * self.dq

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    @property
    def dq(self) -> float:
        return (self.q_max - self.q_min) / self.n_q


def default_grid(market: MarketParams, pop: PopulationSpec, n_t: int = 2000, n_q: int = 400) -> PdeGrid:
    """Truncated inventory domain sized from the initial distributions."""
    q_scale = max(abs(t.pref.E0) + 6.0 * t.spread for t in pop.types)
    if q_scale == 0.0:
        q_scale = 1.0
    e0 = [t.pref.E0 for t in pop.types]
    lo = -0.5 * q_scale if min(e0) >= 0 else -1.5 * q_scale
    hi = 1.5 * q_scale if max(e0) > 0 else 0.5 * q_scale
    return PdeGrid(market.T, n_t, lo, hi, n_q)


def initial_density(grid: PdeGrid, mean: float, spread: float) -> np.ndarray:
    """Unit-mass density on the q nodes (``sum(m) * dq == 1``).

    A zero spread splits a point mass between the two neighbouring nodes so
    that the mean is exact.
    """
    q, dq = grid.q, grid.dq
    if not grid.q_min <= mean <= grid.q_max:
        raise ValueError(f"initial mean {mean} outside the inventory grid")
    if spread > 0:
        m = np.exp(-0.5 * ((q - mean) / spread) ** 2)
    else:
        m = np.zeros_like(q)
        x = (mean - grid.q_min) / dq
        j = min(int(math.floor(x)), grid.n_q - 1)
        frac = x - j
        m[j] += 1.0 - frac
        m[j + 1] += frac
    return m / (m.sum() * dq)


# ---------------------------------------------------------------------------
# kernels

# status codes returned by the kernels
_OK, _CFL, _SUBSTEPS = 0, 1, 2


@njit(cache=True, nogil=True)
def _max_one_sided_grad(v, dq):
    g = 0.0
    for j in range(v.size - 1):
        d = abs(v[j + 1] - v[j]) / dq
        if d > g:
            g = d
    return g


@njit(cache=True, nogil=True)
def _hjb_kernel(q, t, mu, alpha, kappa, phi, cfl, slack, max_sub, v):
    # v[nt] holds the terminal slice on entry
    nt = t.size - 1
    nq = q.size
    dq = q[1] - q[0]
    qabs = max(abs(q[0]), abs(q[nq - 1]))
    cur = v[nt].copy()
    new = np.empty(nq)
    for n in range(nt - 1, -1, -1):
        dt = t[n + 1] - t[n]
        # |dv/dq| can grow by at most dt * sup|d(source)/dq| over the interval
        src = 2.0 * phi * qabs + abs(alpha) * max(abs(mu[n]), abs(mu[n + 1]))
        bound = slack * _max_one_sided_grad(cur, dq) + dt * src + 1e-12
        nsub = max(1, int(math.ceil(dt * bound / (cfl * dq * 2.0 * kappa))))
        if nsub > max_sub:
            return _SUBSTEPS, n, float(nsub), bound
        ds = dt / nsub
        for k in range(nsub):
            s = t[n + 1] - k * ds
            w = (s - t[n]) / dt
            mus = (1.0 - w) * mu[n] + w * mu[n + 1]
            for j in range(nq):
                if j == 0:
                    pm = (cur[1] - cur[0]) / dq
                    pp = pm
                elif j == nq - 1:
                    pm = (cur[j] - cur[j - 1]) / dq
                    pp = pm
                else:
                    pm = (cur[j] - cur[j - 1]) / dq
                    pp = (cur[j + 1] - cur[j]) / dq
                amax = max(abs(pm), abs(pp))
                if amax > bound:
                    return _CFL, n, amax, bound
                pbar = 0.5 * (pm + pp)
                ham = pbar * pbar / (4.0 * kappa) + 0.5 * amax / (2.0 * kappa) * (pp - pm)
                new[j] = cur[j] + ds * (ham - phi * q[j] * q[j] + alpha * q[j] * mus)
            cur, new = new, cur
        v[n, :] = cur
    return _OK, 0, 0.0, 0.0


@njit(cache=True, nogil=True)
def _face_speed(v, kappa, dq, out):
    for j in range(v.size - 1):
        out[j] = (v[j + 1] - v[j]) / (dq * 2.0 * kappa)


@njit(cache=True, nogil=True)
def _transport_kernel(t, dq, kappa, v, cfl, max_sub, m):
    nt = t.size - 1
    nq = m.shape[1]
    cur = m[0].copy()
    new = np.empty(nq)
    u0 = np.empty(nq - 1)
    u1 = np.empty(nq - 1)
    flux = np.empty(nq + 1)
    leak = 0.0
    for n in range(nt):
        dt = t[n + 1] - t[n]
        _face_speed(v[n], kappa, dq, u0)
        _face_speed(v[n + 1], kappa, dq, u1)
        umax = 1e-12
        for j in range(nq - 1):
            umax = max(umax, abs(u0[j]), abs(u1[j]))
        nsub = max(1, int(math.ceil(dt * umax / (cfl * dq))))
        if nsub > max_sub:
            return _SUBSTEPS, n, leak
        ds = dt / nsub
        for k in range(nsub):
            w = (k * ds) / dt
            flux[0] = 0.0
            flux[nq] = 0.0
            for j in range(nq - 1):
                u = (1.0 - w) * u0[j] + w * u1[j]
                if u > 0.0:
                    flux[j + 1] = u * cur[j]
                else:
                    flux[j + 1] = u * cur[j + 1]
            # mass that would have crossed the outer faces
            ul = (1.0 - w) * u0[0] + w * u1[0]
            ur = (1.0 - w) * u0[nq - 2] + w * u1[nq - 2]
            leak += ds * (max(-ul, 0.0) * cur[0] + max(ur, 0.0) * cur[nq - 1]) * dq
            for j in range(nq):
                new[j] = cur[j] - ds / dq * (flux[j + 1] - flux[j])
            cur, new = new, cur
        m[n + 1, :] = cur
    return _OK, 0, leak


# ---------------------------------------------------------------------------
# single-type solves


def solve_hjb_backward(market: MarketParams, pref: Preference, grid: PdeGrid, mu) -> np.ndarray:
    """Value field ``v[t_index, q_index]`` for a given net flow."""
    mu = np.ascontiguousarray(mu, dtype=float)
    if mu.shape != (grid.n_t + 1,):
        raise ValueError("mu must be sampled on the time nodes")
    v = np.empty((grid.n_t + 1, grid.n_q + 1))
    v[-1] = -pref.A * grid.q**2
    status, where, value, bound = _hjb_kernel(
        grid.q, grid.t, mu, market.alpha, market.kappa, pref.phi, CFL, GRAD_SLACK, MAX_SUBSTEPS, v
    )
    if status == _CFL:
        raise CFLError(
            f"gradient {value:.4g} exceeded the CFL bound {bound:.4g} at time index {where}; "
            "refine the time grid or narrow the inventory range"
        )
    if status == _SUBSTEPS:
        raise CFLError(
            f"value march needs {value:.0f} sub-steps in time interval {where} (gradient bound "
            f"{bound:.4g}); refine the time grid or narrow the inventory range"
        )
    return v


def solve_transport_forward(
    market: MarketParams, grid: PdeGrid, v: np.ndarray, m0: np.ndarray, leak_tol: float = LEAK_TOL
) -> tuple[np.ndarray, float]:
    """Density field transported by the speed ``(dv/dq)/(2 kappa)``.

    Returns the density and the mass that reached the outer faces (blocked by
    the no-flux boundary). Raises :class:`BoundaryLeakError` above ``leak_tol``.
    """
    m0 = np.asarray(m0, dtype=float)
    if np.any(m0 < 0):
        raise ValueError("initial density must be nonnegative")
    mass0 = m0.sum() * grid.dq
    if abs(mass0 - 1.0) > MASS_TOL:
        raise ValueError(f"initial density must have unit mass (got {mass0})")
    m = np.empty((grid.n_t + 1, grid.n_q + 1))
    m[0] = m0
    status, where, leak = _transport_kernel(grid.t, grid.dq, market.kappa, np.ascontiguousarray(v), CFL, MAX_SUBSTEPS, m)
    if status == _SUBSTEPS:
        raise CFLError(
            f"transport needs more than {MAX_SUBSTEPS} sub-steps in time interval {where}; "
            "refine the time grid"
        )
    if leak > leak_tol:
        raise BoundaryLeakError(
            f"{leak:.3g} of the mass reached the inventory boundary; widen the q range"
        )
    return m, leak


def face_speed(v: np.ndarray, kappa: float, dq: float) -> np.ndarray:
    """Optimal speed at the cell faces, from the midpoint gradient of ``v``."""
    return np.diff(v, axis=-1) / (2.0 * kappa * dq)


def type_flow(v: np.ndarray, m: np.ndarray, kappa: float, dq: float) -> np.ndarray:
    """Net trading flow of one type on the time nodes.

    The face speeds are paired with the upwind density, the same flux the
    transport step uses, so the result is exactly the rate of change of the
    discrete first moment. Pairing them with a centred density instead leaves
    an O(dq) inconsistency that the fixed point amplifies.
    """
    u = face_speed(v, kappa, dq)
    upwind = np.where(u > 0.0, m[..., :-1], m[..., 1:])
    return np.sum(u * upwind, axis=-1) * dq


def flow_from_fields(pop: PopulationSpec, grid: PdeGrid, kappa: float, vs, ms) -> np.ndarray:
    mu = np.zeros(grid.n_t + 1)
    for typ, v, m in zip(pop.types, vs, ms):
        mu += typ.weight * type_flow(v, m, kappa, grid.dq)
    return mu


# ---------------------------------------------------------------------------
# fixed point


@dataclass(frozen=True)
class PdeState:
    grid: PdeGrid
    v: np.ndarray  # (types, n_t+1, n_q+1)
    m: np.ndarray  # (types, n_t+1, n_q+1)
    mu: np.ndarray
    iterations: int
    residual: float
    history: tuple[float, ...]
    leak: float

    def mass(self) -> np.ndarray:
        return self.m.sum(axis=-1) * self.grid.dq

    def first_moment(self) -> np.ndarray:
        """Per-type mean inventory on the time nodes."""
        return (self.m * self.grid.q).sum(axis=-1) * self.grid.dq

    def mean_inventory(self, pop: PopulationSpec) -> np.ndarray:
        return pop.weights @ self.first_moment()


def _initial_flow(market: MarketParams, pop: PopulationSpec, grid: PdeGrid) -> np.ndarray:
    prefs = {(t.pref.phi, t.pref.A) for t in pop.types}
    if len(prefs) != 1:
        return np.zeros(grid.n_t + 1)
    phi, A = prefs.pop()
    e0 = float(pop.weights @ [t.pref.E0 for t in pop.types])
    sol = solve_homogeneous(market, Preference(phi, A, e0))
    return sol.E_prime(grid.t)


def _solve_type(market, pref, grid, mu, m0, leak_tol):
    v = solve_hjb_backward(market, pref, grid, mu)
    m, leak = solve_transport_forward(market, grid, v, m0, leak_tol)
    return v, m, leak


def evaluate_map(market, pop, grid, mu, densities, leak_tol=LEAK_TOL, pool=None):
    """One application of the best-response map; types run on ``pool`` if given."""
    args = [(market, typ.pref, grid, mu, m0, leak_tol) for typ, m0 in zip(pop.types, densities)]
    if pool is None or len(args) == 1:
        results = [_solve_type(*a) for a in args]
    else:
        results = list(pool.map(lambda a: _solve_type(*a), args))
    vs = [r[0] for r in results]
    ms = [r[1] for r in results]
    leak = max(r[2] for r in results)
    return flow_from_fields(pop, grid, market.kappa, vs, ms), vs, ms, leak


def solve_mfg_fixed_point(
    market: MarketParams,
    pop: PopulationSpec,
    grid: PdeGrid | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
    damping: float = 0.5,
    mu0=None,
    densities=None,
) -> PdeState:
    """Damped iteration ``mu <- (1-damping) mu + damping T(mu)``.

    ``T`` solves every type's value function against ``mu``, transports its
    density and integrates the resulting speeds. The returned state holds the
    last iterate together with the fields computed from it, so
    ``sup|T(mu) - mu| <= tol/damping`` on success. With ``alpha = 0`` the map
    ignores ``mu`` and one evaluation is the answer.
    """
    require_valid(market, pop)
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    grid = grid or default_grid(market, pop)
    if densities is None:
        densities = [initial_density(grid, t.pref.E0, t.spread) for t in pop.types]
    mu = _initial_flow(market, pop, grid) if mu0 is None else np.asarray(mu0, dtype=float)

    history = []
    workers = min(len(pop), thread_count())
    with ThreadPoolExecutor(workers) if workers > 1 else nullcontext() as pool:
        for it in range(1, max_iter + 1):
            out, vs, ms, leak = evaluate_map(market, pop, grid, mu, densities, pool=pool)
            resid = float(np.max(np.abs(out - mu)))
            if market.alpha == 0.0:
                mu, resid = out, 0.0
            change = resid if market.alpha == 0.0 else damping * resid
            history.append(change)
            log.debug("pde iteration %d: update %.3e", it, change)
            if not np.isfinite(change):
                break
            if change <= tol:
                return PdeState(grid, np.array(vs), np.array(ms), mu, it, resid, tuple(history), leak)
            mu = mu + damping * (out - mu)
    raise ConvergenceError(
        f"PDE fixed point did not converge in {max_iter} iterations (last update {history[-1]:.3g})",
        history,
    )


# ---------------------------------------------------------------------------
# binary field dump

MAGIC = b"MFGF"


def dump_fields(path, state: PdeState) -> None:
    """Write ``v`` then ``m`` as little-endian doubles after a small header.

    Layout: ``b"MFGF"``, uint32 version (1), uint32 ndim (3), three uint64 dims
    ``(types, n_t+1, n_q+1)``, float64 ``T, q_min, q_max``, then ``v`` and ``m``
    row-major.
    """
    dims = state.v.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", 1, len(dims)))
        fh.write(struct.pack("<" + "Q" * len(dims), *dims))
        fh.write(struct.pack("<ddd", state.grid.T, state.grid.q_min, state.grid.q_max))
        fh.write(np.ascontiguousarray(state.v, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(state.m, dtype="<f8").tobytes())


def load_fields(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError("not a field dump")
        version, ndim = struct.unpack("<II", fh.read(8))
        dims = struct.unpack("<" + "Q" * ndim, fh.read(8 * ndim))
        T, q_min, q_max = struct.unpack("<ddd", fh.read(24))
        count = int(np.prod(dims))
        v = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims)
        m = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims)
    return {"version": version, "T": T, "q_min": q_min, "q_max": q_max, "v": v, "m": m}
