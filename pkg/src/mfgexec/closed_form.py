"""Exact equilibrium when every agent shares the same preferences.

The net inventory ``E`` solves the linear two-point problem

    2*kappa*E'' + alpha*E' - 2*phi*E = 0,   E(0) = E0,   kappa*E'(T) + A*E(T) = 0,

``h2`` solves the scalar Riccati equation ``-2*kappa*h2' - 4*kappa*phi + h2**2 = 0``
with ``h2(T) = 2A``, and ``h1 = 2*kappa*E' + h2*E``. The reduced value function
is ``v(t, q) = h0 + q*h1 - q**2*h2/2`` and the optimal feedback is
``nu(t, q) = (h1 - q*h2) / (2*kappa)``.

Internally ``E`` is written as

    E(t) = E0 * exp(-beta*t) * (K*p(t) + exp(-theta*t)),
    p(t) = exp(-theta*T) * sinh(theta*t)/theta,    beta = alpha/(4*kappa),

which is the usual ``a*(exp(r+ t) - exp(r- t)) + exp(r- t)`` combination
rescaled so that nothing overflows for large ``theta*T`` and the
``theta -> 0`` limit (``phi = alpha = 0``) is continuous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import NumericalError, ScenarioError
from .model import MarketParams, Preference, check_time, require_valid

DEFAULT_QUAD_N = 1000
TM_SCAN_INTERVALS = 1000
TM_XTOL = 1e-8


@dataclass(frozen=True)
class HomogeneousSolution:
    market: MarketParams
    pref: Preference
    theta: float
    r_plus: float
    r_minus: float
    a_coef: float
    r: float
    c2: float
    quad_n: int = DEFAULT_QUAD_N
    sign_convention: str = "terminal"
    # K in the rescaled representation (see module docstring)
    _k: float = 0.0

    @property
    def T(self) -> float:
        return self.market.T

    @property
    def beta(self) -> float:
        return self.market.alpha / (4.0 * self.market.kappa)

    # -- E and its derivatives -------------------------------------------

    def _y(self, t):
        th, T = self.theta, self.T
        # p = e^{-th T} sinh(th t)/th, written to avoid overflow
        if th == 0.0:
            p = np.asarray(t, dtype=float) * 1.0
            dp = np.ones_like(p)
        else:
            p = np.exp(th * (t - T)) * (-np.expm1(-2.0 * th * t)) / (2.0 * th)
            dp = 0.5 * (np.exp(th * (t - T)) + np.exp(-th * (t + T)))
        q = np.exp(-th * t)
        y = self._k * p + q
        dy = self._k * dp - th * q
        return y, dy

    def E(self, t):
        t = check_time(t, self.T)
        y, _ = self._y(t)
        return self.pref.E0 * np.exp(-self.beta * t) * y

    def E_prime(self, t):
        t = check_time(t, self.T)
        y, dy = self._y(t)
        return self.pref.E0 * np.exp(-self.beta * t) * (dy - self.beta * y)

    def E_second(self, t):
        t = check_time(t, self.T)
        y, dy = self._y(t)
        b = self.beta
        return self.pref.E0 * np.exp(-b * t) * ((self.theta**2 + b * b) * y - 2.0 * b * dy)

    # -- h2 -------------------------------------------------------------

    def _h2_parts(self, t):
        # h2 = 2*(A(1+u) + s(1-u)) / (A(1-u)/s + (1+u)), u = exp(-r (T-t)), s = sqrt(kappa*phi);
        # algebraically the textbook (1+c2 e^{rt})/(1-c2 e^{rt}) form, but finite at phi = 0
        kappa, A = self.market.kappa, self.pref.A
        s = math.sqrt(kappa * self.pref.phi)
        tau = self.T - np.asarray(t, dtype=float)
        u = np.exp(-self.r * tau)
        if s == 0.0:
            w = 2.0 * tau / kappa  # (1-u)/s in the limit
        else:
            w = -np.expm1(-self.r * tau) / s
        one_minus_u = s * w
        num = A * (1.0 + u) + s * one_minus_u
        den = A * w + (1.0 + u)
        dnum = (A - s) * self.r * u
        dden = u * (self.r - 2.0 * A / kappa)
        if s == 0.0:
            dnum = np.zeros_like(u)
            dden = -2.0 * A / kappa * np.ones_like(u)
        return num, den, dnum, dden

    def h2(self, t):
        t = check_time(t, self.T)
        num, den, _, _ = self._h2_parts(t)
        return 2.0 * num / den

    def h2_prime(self, t):
        t = check_time(t, self.T)
        num, den, dnum, dden = self._h2_parts(t)
        return 2.0 * (dnum * den - num * dden) / den**2

    # -- h1, h0, control, value -------------------------------------------

    def h1(self, t):
        return 2.0 * self.market.kappa * self.E_prime(t) + self.h2(t) * self.E(t)

    def h1_prime(self, t):
        return (
            2.0 * self.market.kappa * self.E_second(t)
            + self.h2_prime(t) * self.E(t)
            + self.h2(t) * self.E_prime(t)
        )

    def mu(self, t):
        """Net trading flow; equals ``E'`` for a homogeneous population."""
        return self.E_prime(t)

    @cached_property
    def _h0_table(self):
        n = 10 * self.quad_n
        s = np.arange(n + 1) * self.T / n
        s[-1] = self.T
        f = self.h1(s) ** 2
        pieces = 0.5 * (f[1:] + f[:-1]) * np.diff(s)
        tail = np.concatenate([np.cumsum(pieces[::-1])[::-1], [0.0]])
        return s, tail

    def h0(self, t):
        """``(1/(4 kappa)) * int_t^T h1(s)^2 ds`` by composite trapezoid."""
        t = check_time(t, self.T)
        s, tail = self._h0_table
        tt = np.atleast_1d(t)
        j = np.clip(np.searchsorted(s, tt, side="right") - 1, 0, len(s) - 2)
        right = s[j + 1]
        partial = 0.5 * (right - tt) * (self.h1(tt) ** 2 + self.h1(right) ** 2)
        out = (tail[j + 1] + partial) / (4.0 * self.market.kappa)
        out[tt >= self.T] = 0.0
        return float(out[0]) if np.ndim(t) == 0 else out

    def nu(self, t, q):
        """Optimal trading speed of an agent holding ``q`` at time ``t``."""
        return (self.h1(t) - np.asarray(q) * self.h2(t)) / (2.0 * self.market.kappa)

    def value(self, t, q):
        q = np.asarray(q, dtype=float)
        return self.h0(t) + q * self.h1(t) - 0.5 * q**2 * self.h2(t)

    def full_value(self, t, x, s, q):
        return x + np.asarray(q) * s + self.value(t, q)


def solve_homogeneous(
    market: MarketParams,
    pref: Preference,
    quad_n: int = DEFAULT_QUAD_N,
    sign_convention: str = "terminal",
) -> HomogeneousSolution:
    """Closed-form coefficients for identical preferences.

    Parameters
    ----------
    market, pref
        Model parameters. ``phi = alpha = 0`` is allowed and gives the linear
        (``A > 0``) or constant (``A = 0``) inventory path.
    quad_n
        Base resolution of the ``h0`` quadrature, which uses ``10*quad_n``
        trapezoid intervals.
    sign_convention
        ``"terminal"`` (default) picks the mixing coefficient that satisfies
        ``kappa*E'(T) + A*E(T) = 0``. ``"published"`` flips its sign, which
        gives ``E(T) ~ 0.02`` for the reference parameters and a slope reversal
        near ``t = 3.82`` for the low-impact set, but violates the terminal
        condition. It exists only to diagnose sign-convention discrepancies.
    """
    if sign_convention not in ("terminal", "published"):
        raise ValueError(f"unknown sign convention {sign_convention!r}")
    require_valid(market)
    bad = pref.violations()
    if bad:
        raise ScenarioError("; ".join(bad))
    alpha, kappa, phi, A, T = market.alpha, market.kappa, pref.phi, pref.A, market.T

    theta = math.sqrt(kappa * phi + alpha**2 / 16.0) / kappa
    beta = alpha / (4.0 * kappa)
    r_plus, r_minus = -beta + theta, -beta - theta

    # boundary condition kappa*E'(T) + A*E(T) = 0 in the rescaled variables
    e2 = math.exp(-2.0 * theta * T)
    pT = T if theta == 0.0 else -math.expm1(-2.0 * theta * T) / (2.0 * theta)
    denom = kappa * 0.5 * (1.0 + e2) + (A - kappa * beta) * pT
    if not denom > 0:
        raise NumericalError(f"boundary-condition denominator is not positive ({denom!r})")
    k = (kappa * theta + kappa * beta - A) * math.exp(-theta * T) / denom

    if theta > 0:
        a_den = (A - alpha / 4.0) * (-math.expm1(-2.0 * theta * T)) + kappa * theta * (1.0 + e2)
        a_coef = (alpha / 4.0 + kappa * theta - A) * e2 / a_den
    else:
        a_coef = math.nan

    if sign_convention == "published":
        if theta == 0.0:
            raise ScenarioError("published sign convention needs phi > 0 or alpha != 0")
        k, a_coef = -k, -a_coef

    r = 2.0 * math.sqrt(phi / kappa)
    s = math.sqrt(kappa * phi)
    if s > 0:  # phi can be positive yet underflow here
        c2 = -((s - A) / (s + A)) * math.exp(-r * T)
    else:
        c2 = math.nan

    sol = HomogeneousSolution(
        market=market, pref=pref, theta=theta, r_plus=r_plus, r_minus=r_minus,
        a_coef=a_coef, r=r, c2=c2, quad_n=int(quad_n),
        sign_convention=sign_convention, _k=k,
    )
    # |c2 e^{rt}| < 1 always holds for A >= 0; cheap defensive check at both ends
    den = sol._h2_parts(np.array([0.0, T]))[1]
    if np.any(den <= 0):
        raise NumericalError("h2 has a pole inside the horizon")
    return sol


def find_slope_reversal(sol: HomogeneousSolution, intervals: int = TM_SCAN_INTERVALS, xtol: float = TM_XTOL):
    """Smallest ``t`` in (0, T) where ``E'`` changes sign, or ``None``.

    Scans ``E'`` on a uniform grid and refines the first bracketing interval by
    bisection.
    """
    if sol.pref.E0 == 0.0:
        return None
    T = sol.T
    t = np.arange(intervals + 1) * T / intervals
    t[-1] = T
    d = sol.E_prime(t)
    sign = np.sign(d)
    for i in range(1, intervals):
        if sign[i] == 0.0:
            return float(t[i])
    for i in range(intervals):
        if sign[i] * sign[i + 1] < 0:
            lo, hi = t[i], t[i + 1]
            s_lo = sign[i]
            while hi - lo > xtol:
                mid = 0.5 * (lo + hi)
                s_mid = np.sign(sol.E_prime(mid))
                if s_mid == 0.0:
                    return float(mid)
                if s_mid == s_lo:
                    lo = mid
                else:
                    hi = mid
            tm = 0.5 * (lo + hi)
            return float(tm) if 0.0 < tm < T else None
    return None
