import math

import numpy as np
import pytest

from mfgexec.closed_form import solve_homogeneous
from mfgexec.hetero import solve_direct
from mfgexec.model import AgentType, MarketParams, PopulationSpec, Preference, TimeGrid
from mfgexec.simulate import (
    Feedback,
    Perturbation,
    SimConfig,
    deviation_test,
    expected_value,
    feedback_from_closed_form,
    feedback_from_flow,
    mean_speed,
    recompute_objective,
    run_ensemble,
    simulate,
)

PREF = Preference(0.1, 2.5, 10.0)


def _setup(sigma=0.0, spread=0.0, alpha=0.4, N=200):
    market = MarketParams(alpha, 0.2, sigma, 5.0)
    sol = solve_homogeneous(market, PREF)
    pop = PopulationSpec.single(PREF, spread)
    return market, pop, sol, feedback_from_closed_form(sol, TimeGrid(5.0, N))


def test_noiseless_inventory_tracks_the_mean_path():
    market, pop, sol, fb = _setup()
    out = simulate(market, pop, fb, SimConfig(paths=1, steps=1000, report_points=51))
    assert np.max(np.abs(out.Q_mean[0] - sol.E(out.t))) <= 1e-4 * 10.0


def test_constant_speed_cash_benchmark():
    nu, S0, kappa, T = -1.3, 50.0, 0.2, 5.0
    market = MarketParams(0.0, kappa, 0.0, T)
    pop = PopulationSpec.single(Preference(0.0, 0.0, 8.0))
    grid = TimeGrid(T, 10)
    fb = Feedback(market, grid, np.full((1, 11), 2 * kappa * nu), np.zeros((1, 11)), np.full(11, nu))
    ens = run_ensemble(market, pop, fb, SimConfig(paths=2, steps=500, S0=S0, store_paths=True))
    assert np.max(np.abs(ens.X[:, 0, -1] + nu * T * (S0 + kappa * nu))) <= 1e-10
    assert np.allclose(ens.Q[:, 0, -1], 8.0 + nu * T, rtol=0, atol=1e-12)


def test_zero_perturbation_gives_exactly_zero_difference():
    market, pop, _, fb = _setup(sigma=0.4, spread=0.25)
    rep = deviation_test(market, pop, fb, SimConfig(paths=300, steps=200, S0=100.0, seed=2), Perturbation())
    assert rep.mean_diff == 0.0 and rep.se_diff == 0.0 and rep.z == 0.0
    assert not rep.worse()


@pytest.mark.parametrize("perturbation", [Perturbation(factor=1.2), Perturbation(factor=0.8),
                                          Perturbation(offset=0.2), Perturbation(offset=-0.2)])
def test_noiseless_deviation_is_strictly_worse(perturbation):
    market, pop, _, fb = _setup()
    rep = deviation_test(market, pop, fb, SimConfig(paths=1, steps=2000, S0=100.0), perturbation)
    assert rep.mean_diff < 0


def test_noisy_deviations_are_significantly_worse():
    market, pop, _, fb = _setup(sigma=0.4, spread=0.25)
    cfg = SimConfig(paths=2000, steps=500, S0=100.0, seed=7)
    base = run_ensemble(market, pop, fb, cfg)
    for p in (Perturbation(factor=1.2), Perturbation(offset=-0.2)):
        assert deviation_test(market, pop, fb, cfg, p, base=base).worse(3.0)


def test_mean_objective_matches_value_function():
    market, pop, sol, fb = _setup(sigma=0.4, spread=0.25)
    out = simulate(market, pop, fb, SimConfig(paths=4000, steps=500, S0=100.0, seed=3))
    expected = expected_value(sol, 100.0, spread=0.25)
    assert abs(out.mean_J[0] - expected) <= 4 * out.se_J[0]


def test_noiseless_objective_converges_at_second_order():
    market, pop, sol, fb = _setup()
    expected = expected_value(sol, 100.0)
    errs = [abs(simulate(market, pop, fb, SimConfig(paths=1, steps=n, S0=100.0)).mean_J[0] - expected)
            for n in (100, 200, 400)]
    assert errs[0] / errs[1] >= 3.5 and errs[1] / errs[2] >= 3.5


def test_population_speed_reproduces_the_flow():
    market = MarketParams(0.2, 0.2, 0.0, 5.0)
    kappa = 0.2
    pop = PopulationSpec((
        AgentType(0.5, Preference(0.1, math.sqrt(kappa * 0.1), 6.0)),
        AgentType(0.5, Preference(0.4, math.sqrt(kappa * 0.4), 4.0)),
    ))
    grid = TimeGrid(5.0, 400)
    flow = solve_direct(market, pop, grid)
    fb = feedback_from_flow(market, pop, flow)
    out = simulate(market, pop, fb, SimConfig(paths=1, steps=400, report_points=401))
    # noiseless agents sit on their type means, so their weighted speed is the flow
    speeds = np.array([mean_speed(fb, pop, t, out.Q_mean[:, i]) for i, t in enumerate(out.t)])
    assert np.max(np.abs(speeds - flow.mu)) <= 1e-8 * np.max(np.abs(flow.mu))


def test_mean_inventory_does_not_depend_on_price_noise():
    quiet, noisy = _setup(sigma=0.0, spread=0.25), _setup(sigma=2.0, spread=0.25)
    cfg = SimConfig(paths=64, steps=200, seed=5)
    a = simulate(quiet[0], quiet[1], quiet[3], cfg)
    b = simulate(noisy[0], noisy[1], noisy[3], cfg)
    assert np.array_equal(a.Q_mean, b.Q_mean)
    assert not np.array_equal(a.S_mean, b.S_mean)


def test_runs_are_deterministic_and_chunk_independent(monkeypatch):
    market, pop, _, fb = _setup(sigma=0.4, spread=0.25)
    cfg = SimConfig(paths=2500, steps=50, S0=100.0, seed=11)
    a = run_ensemble(market, pop, fb, cfg)
    monkeypatch.setenv("MFGEXEC_THREADS", "1")
    b = run_ensemble(market, pop, fb, cfg)
    assert np.array_equal(a.J, b.J)
    small = run_ensemble(market, pop, fb, SimConfig(paths=10, steps=50, S0=100.0, seed=11))
    assert np.array_equal(small.J, a.J[:10])


def test_recomputed_objective_matches_accumulated():
    market, pop, _, fb = _setup(sigma=0.4, spread=0.25)
    ens = run_ensemble(market, pop, fb, SimConfig(paths=20, agents_per_type=3, steps=300, S0=100.0,
                                                  store_paths=True))
    assert ens.Q.shape == (20, 3, 301) and ens.S.shape == (20, 301)
    assert np.max(np.abs(recompute_objective(pop, ens) - ens.J)) <= 1e-10 * np.max(np.abs(ens.J))


def test_trajectories_require_storage():
    market, pop, _, fb = _setup()
    ens = run_ensemble(market, pop, fb, SimConfig(paths=2, steps=20))
    assert ens.Q is None
    with pytest.raises(ValueError, match="store_paths"):
        recompute_objective(pop, ens)


def test_invalid_configs():
    market, pop, _, fb = _setup()
    for cfg in (SimConfig(paths=0), SimConfig(paths=1, steps=0), SimConfig(paths=1, seed=-1)):
        with pytest.raises(ValueError):
            run_ensemble(market, pop, fb, cfg)
    with pytest.raises(IndexError):
        deviation_test(market, pop, fb, SimConfig(paths=2, steps=10), Perturbation(1.2), type_index=1)


def test_perturbation_labels():
    assert Perturbation(factor=1.2).label() == "factor=1.2"
    assert Perturbation(offset=-0.2).label() == "offset=-0.2"
    assert Perturbation().is_zero
