import math

import numpy as np
import pytest

from mfgexec.closed_form import solve_homogeneous
from mfgexec.errors import BoundaryLeakError, CFLError, ScenarioError
from mfgexec.hetero import solve_direct
from mfgexec.model import AgentType, MarketParams, PopulationSpec, Preference, TimeGrid
from mfgexec.pde import (
    PdeGrid,
    default_grid,
    dump_fields,
    initial_density,
    load_fields,
    solve_hjb_backward,
    solve_mfg_fixed_point,
    solve_transport_forward,
)

REF = MarketParams(0.4, 0.2, 0.0, 5.0)
REF_PREF = Preference(0.1, 2.5, 10.0)


def test_zero_data_gives_zero_value():
    grid = PdeGrid(1.0, 50, -2.0, 2.0, 40)
    v = solve_hjb_backward(REF, Preference(0.0, 0.0), grid, np.zeros(51))
    assert np.all(v == 0.0)


def test_terminal_slice_is_assigned_exactly():
    grid = PdeGrid(5.0, 100, -5.75, 17.25, 100)
    v = solve_hjb_backward(REF, REF_PREF, grid, np.zeros(101))
    assert np.array_equal(v[-1], -2.5 * grid.q**2)


def _value_error(n_t, n_q):
    sol = solve_homogeneous(REF, REF_PREF)
    grid = default_grid(REF, PopulationSpec.single(REF_PREF, 0.25), n_t, n_q)
    v = solve_hjb_backward(REF, REF_PREF, grid, sol.E_prime(grid.t))
    mask = np.abs(grid.q) <= 15
    tt, qq = np.meshgrid(grid.t, grid.q[mask], indexing="ij")
    exact = sol.value(tt.ravel(), qq.ravel()).reshape(tt.shape)
    return np.max(np.abs(v[:, mask] - exact)) / np.max(np.abs(exact))


def test_value_matches_closed_form_and_converges():
    coarse, fine = _value_error(1000, 200), _value_error(2000, 400)
    assert fine <= 0.02
    assert coarse / fine >= 1.9


def test_zero_speed_leaves_density_unchanged():
    grid = PdeGrid(1.0, 20, -3.0, 3.0, 60)
    m0 = initial_density(grid, 0.5, 0.4)
    m, leak = solve_transport_forward(REF, grid, np.zeros((21, 61)), m0)
    assert np.array_equal(m, np.broadcast_to(m0, m.shape))
    assert leak == 0.0


def test_transport_first_moment_follows_closed_form():
    sol = solve_homogeneous(REF, REF_PREF)
    grid = default_grid(REF, PopulationSpec.single(REF_PREF, 0.5), 2000, 400)
    tt, qq = np.meshgrid(grid.t, grid.q, indexing="ij")
    v = sol.value(tt.ravel(), qq.ravel()).reshape(tt.shape)
    m, _ = solve_transport_forward(REF, grid, v, initial_density(grid, 10.0, 0.5))
    mean = (m * grid.q).sum(axis=1) * grid.dq
    assert np.max(np.abs(mean - sol.E(grid.t))) / 10.0 <= 0.02
    assert np.max(np.abs(m.sum(axis=1) * grid.dq - 1)) <= 1e-6
    assert m.min() >= 0


def test_initial_density_validation():
    grid = PdeGrid(1.0, 10, 0.0, 1.0, 10)
    with pytest.raises(ValueError):
        solve_transport_forward(REF, grid, np.zeros((11, 11)), np.full(11, 2.0))
    with pytest.raises(ValueError):
        solve_transport_forward(REF, grid, np.zeros((11, 11)), -initial_density(grid, 0.5, 0.1))
    with pytest.raises(ValueError):
        initial_density(grid, 2.0, 0.1)


def test_point_mass_keeps_its_mean():
    grid = PdeGrid(1.0, 10, -1.0, 1.0, 7)
    m = initial_density(grid, 0.123, 0.0)
    assert (m * grid.q).sum() * grid.dq == pytest.approx(0.123, abs=1e-14)
    assert m.sum() * grid.dq == pytest.approx(1.0, abs=1e-14)


def test_leak_through_narrow_domain_is_an_error():
    sol = solve_homogeneous(REF, REF_PREF)
    grid = PdeGrid(5.0, 200, 1.0, 11.0, 100)
    tt, qq = np.meshgrid(grid.t, grid.q, indexing="ij")
    v = sol.value(tt.ravel(), qq.ravel()).reshape(tt.shape)
    with pytest.raises(BoundaryLeakError, match="widen"):
        solve_transport_forward(REF, grid, v, initial_density(grid, 10.0, 0.25))


def test_gradient_blowup_inside_a_step_is_a_cfl_error():
    # a flow that jumps inside one coarse interval steepens v beyond the step's bound
    grid = PdeGrid(5.0, 2, -10.0, 10.0, 400)
    mu = np.array([0.0, 0.0, 5e4])
    with pytest.raises(CFLError, match="refine"):
        solve_hjb_backward(MarketParams(5.0, 0.2, 0.0, 5.0), Preference(0.1, 0.0), grid, mu)


def test_symmetric_zero_mean_population_has_zero_flow():
    pop = PopulationSpec.single(Preference(0.1, 2.5, 0.0), 1.0)
    state = solve_mfg_fixed_point(REF, pop, PdeGrid(5.0, 500, -8.0, 8.0, 160), tol=1e-8)
    assert np.max(np.abs(state.mu)) <= 1e-6


def test_symmetric_population_from_a_nonzero_start():
    pop = PopulationSpec.single(Preference(0.1, 2.5, 0.0), 1.0)
    grid = PdeGrid(5.0, 200, -8.0, 8.0, 80)
    state = solve_mfg_fixed_point(REF, pop, grid, tol=1e-8, mu0=np.ones(201))
    assert np.max(np.abs(state.mu)) <= 1e-6


def test_no_impact_converges_in_one_iteration():
    market = MarketParams(0.0, 0.2, 0.0, 5.0)
    pop = PopulationSpec.single(REF_PREF, 0.25)
    state = solve_mfg_fixed_point(market, pop, default_grid(market, pop, 400, 100))
    assert state.iterations == 1


def _moment_error(n_t, n_q):
    sol = solve_homogeneous(REF, REF_PREF)
    pop = PopulationSpec.single(REF_PREF, 0.25)
    state = solve_mfg_fixed_point(REF, pop, default_grid(REF, pop, n_t, n_q))
    return state, np.max(np.abs(state.mean_inventory(pop) - sol.E(state.grid.t))) / 10.0


def test_fixed_point_invariants():
    state, err = _moment_error(500, 100)
    assert err <= 0.02
    assert np.max(np.abs(state.mass() - 1)) <= 1e-6
    assert state.m.min() >= 0
    assert state.residual <= 2 * 1e-8 / 0.5
    assert np.array_equal(state.v[0, -1], -2.5 * state.grid.q**2)


def test_mixture_matches_hetero_solver(two_types):
    market = MarketParams(0.2, 0.2, 0.0, 5.0)
    pop = PopulationSpec(tuple(AgentType(t.weight, t.pref, 0.25) for t in two_types.types))
    errs = []
    for n_t, n_q in ((500, 100), (1000, 200)):
        state = solve_mfg_fixed_point(market, pop, default_grid(market, pop, n_t, n_q))
        ref = solve_direct(market, pop, TimeGrid(5.0, n_t)).mu
        errs.append(np.max(np.abs(state.mu - ref)) / np.max(np.abs(ref)))
    assert errs[1] < errs[0]
    assert errs[1] < 0.02


def test_invalid_scenarios_are_rejected():
    with pytest.raises(ScenarioError):
        solve_mfg_fixed_point(MarketParams(0.4, -0.2, 0.0, 5.0), PopulationSpec.single(REF_PREF))
    with pytest.raises(ValueError):
        solve_mfg_fixed_point(REF, PopulationSpec.single(REF_PREF), damping=0.0)
    with pytest.raises(ValueError):
        PdeGrid(1.0, 10, 1.0, 0.0, 10)


def test_negative_inventories_get_a_mirrored_domain():
    pop = PopulationSpec.single(Preference(0.1, 2.5, -4.0), 0.5)
    grid = default_grid(REF, pop)
    assert grid.q_min == pytest.approx(-1.5 * 7.0)
    assert grid.q_max == pytest.approx(0.5 * 7.0)


def test_field_dump_round_trip(tmp_path):
    pop = PopulationSpec.single(REF_PREF, 0.25)
    state = solve_mfg_fixed_point(REF, pop, default_grid(REF, pop, 50, 20))
    path = tmp_path / "fields.bin"
    dump_fields(path, state)
    data = load_fields(path)
    assert data["version"] == 1
    assert np.array_equal(data["v"], state.v)
    assert np.array_equal(data["m"], state.m)
    assert (data["q_min"], data["q_max"], data["T"]) == (state.grid.q_min, state.grid.q_max, 5.0)
    assert path.stat().st_size == 4 + 8 + 24 + 24 + 2 * 8 * state.v.size
