import math

import numpy as np
import pytest

from mfgexec.closed_form import solve_homogeneous
from mfgexec.errors import ConvergenceError, IllConditionedError, ScenarioError
from mfgexec.hetero import (
    apply_phi_alpha,
    build_operator,
    estimate_contraction,
    recover_type_solution,
    solve_direct,
    solve_picard,
)
from mfgexec.model import AgentType, MarketParams, PopulationSpec, Preference, TimeGrid

MATCHED_A = math.sqrt(0.02)


def single(alpha, E0=10.0):
    return MarketParams(alpha, 0.2, 0.0, 5.0), PopulationSpec.single(Preference(0.1, MATCHED_A, E0))


def test_no_impact_map_ignores_input(two_types):
    market = MarketParams(0.0, 0.2, 0.0, 5.0)
    grid = TimeGrid(5.0, 200)
    t = grid.nodes
    expected = -sum(
        typ.weight * (typ.pref.A / 0.2) * np.exp(-(typ.pref.A / 0.2) * t) * typ.pref.E0 for typ in two_types.types
    )
    for mu in (np.zeros(201), np.sin(t) * 50):
        assert np.allclose(apply_phi_alpha(market, two_types, grid, mu), expected, rtol=0, atol=1e-13)


def test_no_impact_map_is_closed_form_flow():
    market, pop = single(0.0)
    grid = TimeGrid(5.0, 500)
    sol = solve_homogeneous(market, pop.types[0].pref)
    out = apply_phi_alpha(market, pop, grid, np.zeros(501))
    assert np.allclose(out, sol.E_prime(grid.nodes), rtol=1e-12, atol=1e-12)


def test_unmatched_type_is_rejected_by_name():
    market = MarketParams(0.4, 0.2, 0.0, 5.0)
    pop = PopulationSpec((AgentType(0.5, Preference(0.1, MATCHED_A)), AgentType(0.5, Preference(0.1, 2.5))))
    with pytest.raises(ScenarioError, match="type 1"):
        apply_phi_alpha(market, pop, TimeGrid(5.0, 10), np.zeros(11))


def test_map_is_affine(two_types):
    market = MarketParams(0.3, 0.2, 0.0, 5.0)
    grid = TimeGrid(5.0, 100)
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=101), rng.normal(size=101)
    f = lambda m: apply_phi_alpha(market, two_types, grid, m)
    assert np.allclose(f(0.3 * x + 0.7 * y), 0.3 * f(x) + 0.7 * f(y), rtol=1e-12, atol=1e-12)


def test_single_type_matches_closed_form_at_second_order():
    market, pop = single(0.4)
    sol = solve_homogeneous(market, pop.types[0].pref)
    errs = []
    for n in (250, 500, 1000, 2000):
        grid = TimeGrid(5.0, n)
        errs.append(np.max(np.abs(solve_direct(market, pop, grid).mu - sol.E_prime(grid.nodes))))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios >= 3) & (ratios <= 5)), ratios
    assert errs[-1] <= 1e-5


def test_picard_agrees_with_direct(two_types):
    market = MarketParams(0.2, 0.2, 0.0, 5.0)
    grid = TimeGrid(5.0, 1000)
    p = solve_picard(market, two_types, grid, tol=1e-12)
    d = solve_direct(market, two_types, grid)
    assert np.max(np.abs(p.mu - d.mu)) <= 1e-10
    assert p.residual <= 1e-12
    assert d.residual <= 1e-10


def test_picard_without_impact_takes_one_iteration(two_types):
    market = MarketParams(0.0, 0.2, 0.0, 5.0)
    flow = solve_picard(market, two_types, TimeGrid(5.0, 100))
    assert flow.iterations == 1


def test_picard_residuals_decay_at_contraction_rate(two_types):
    market = MarketParams(0.2, 0.2, 0.0, 5.0)
    grid = TimeGrid(5.0, 500)
    factor = estimate_contraction(market, two_types, grid)
    assert factor < 1
    h = np.array(solve_picard(market, two_types, grid, tol=1e-12).history)
    assert np.all(h[1:] / h[:-1] <= factor + 0.05)


def test_damping_still_converges(two_types):
    market = MarketParams(0.2, 0.2, 0.0, 5.0)
    grid = TimeGrid(5.0, 200)
    a = solve_picard(market, two_types, grid, tol=1e-12, damping=0.5)
    b = solve_direct(market, two_types, grid)
    assert np.max(np.abs(a.mu - b.mu)) < 1e-10


def test_divergent_picard_reports_history(two_types):
    market = MarketParams(12.0, 0.2, 0.0, 5.0)
    with pytest.raises(ConvergenceError) as info:
        solve_picard(market, two_types, TimeGrid(5.0, 100), max_iter=50)
    assert len(info.value.history) > 1


def test_singular_system_is_detected(two_types):
    # pick alpha = 1/lambda for a real eigenvalue of K so I - alpha*K is singular
    grid = TimeGrid(5.0, 100)
    K = build_operator(MarketParams(1.0, 0.2, 0.0, 5.0), two_types, grid).K
    lam = np.linalg.eigvals(K)
    real = lam[np.abs(lam.imag) < 1e-12 * np.abs(lam)].real
    lam0 = real[np.argmax(np.abs(real))]
    with pytest.raises(IllConditionedError):
        solve_direct(MarketParams(1.0 / lam0, 0.2, 0.0, 5.0), two_types, grid)


def test_recovered_type_solution_matches_closed_form():
    market, pop = single(0.4)
    sol = solve_homogeneous(market, pop.types[0].pref)
    grid = TimeGrid(5.0, 2000)
    ts = recover_type_solution(market, pop, 0, solve_direct(market, pop, grid))
    t = grid.nodes
    assert ts.E[0] == 10.0
    assert ts.h1[-1] == 0.0
    assert np.max(np.abs(ts.E - sol.E(t))) < 1e-5
    assert np.max(np.abs(ts.h1 - sol.h1(t))) < 1e-4
    with pytest.raises(IndexError):
        recover_type_solution(market, pop, 3, solve_direct(market, pop, grid))


def test_types_aggregate_to_the_flow(two_types):
    market = MarketParams(0.2, 0.2, 0.0, 5.0)
    grid = TimeGrid(5.0, 400)
    flow = solve_direct(market, two_types, grid)
    total = 0.0
    for k, typ in enumerate(two_types.types):
        ts = recover_type_solution(market, two_types, k, flow)
        total = total + typ.weight * (ts.h1 / (2 * 0.2) - ts.theta * ts.E)
    assert np.allclose(total, flow.mu, atol=1e-9)


def test_operator_is_read_only(two_types):
    op = build_operator(MarketParams(0.2, 0.2, 0.0, 5.0), two_types, TimeGrid(5.0, 20))
    with pytest.raises(ValueError):
        op.K[0, 0] = 1.0


def test_flow_interpolates_between_nodes(two_types):
    flow = solve_direct(MarketParams(0.2, 0.2, 0.0, 5.0), two_types, TimeGrid(5.0, 10))
    assert flow.at(0.25) == pytest.approx(0.5 * (flow.mu[0] + flow.mu[1]))


def test_bad_iteration_settings(two_types):
    market, grid = MarketParams(0.2, 0.2, 0.0, 5.0), TimeGrid(5.0, 10)
    with pytest.raises(ValueError):
        solve_picard(market, two_types, grid, tol=0)
    with pytest.raises(ValueError):
        solve_picard(market, two_types, grid, damping=1.5)
