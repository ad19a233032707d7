"""Command-line drivers.

Every solver command reads a TOML scenario, writes CSV tables into ``--out``
and finishes with ``manifest.json`` describing the run (scenario text,
resolved options, seeds, output hashes). ``replay`` re-runs a manifest.

Exit codes: 0 success, 2 scenario or option error, 3 numerical failure.
"""

from __future__ import annotations

import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import output
from .closed_form import find_slope_reversal, solve_homogeneous
from .errors import MfgError, NumericalError, ScenarioError
from .hetero import estimate_contraction, recover_type_solution, solve_direct, solve_picard
from .learning import LearningConfig, run_learning
from .model import MarketParams, Preference, TimeGrid, validate_scenario
from .pde import THREADS_ENV, default_grid, dump_fields, solve_mfg_fixed_point, thread_count
from .scenario import Scenario, load_scenario, parse_scenario
from .simulate import (
    Perturbation,
    SimConfig,
    deviation_test,
    expected_value,
    feedback_from_closed_form,
    feedback_from_flow,
    simulate,
)

log = logging.getLogger("mfgexec")

EXIT_SCENARIO = 2
EXIT_NUMERICAL = 3

# t^m sweep box used when neither the scenario nor the command line gives one
DEFAULT_SWEEP = {
    "alpha": (0.001, 0.1, 10),
    "kappa": (0.5, 3.0, 11),
    "phi": (0.005, 0.05, 4),
    "A": 2.5,
    "T": 5.0,
    "E0": 10.0,
}


def _pick(opts: dict, key: str, *fallbacks):
    """First non-None of the command-line value and the fallbacks."""
    if opts.get(key) is not None:
        return opts[key]
    for value in fallbacks:
        if value is not None:
            return value
    return None


def _homogeneous_solution(scn: Scenario, published: bool = False):
    if not scn.homogeneous:
        raise ScenarioError(
            "closed form needs every type to share (phi, A); use the hetero command for mixtures"
        )
    p = scn.pop.types[0].pref
    e0 = float(scn.pop.weights @ [t.pref.E0 for t in scn.pop.types])
    return solve_homogeneous(
        scn.market, Preference(p.phi, p.A, e0), sign_convention="published" if published else "terminal"
    )


# ---------------------------------------------------------------------------
# runners: (scenario, options, out dir) -> (resolved options, files, results)


def run_closed_form(scn: Scenario, opts: dict, out: Path):
    n = int(_pick(opts, "grid_n", scn.grid.get("N"), 1000))
    published = bool(opts.get("published_sign", False))
    sol = _homogeneous_solution(scn, published)
    t = TimeGrid(scn.market.T, n).nodes
    h1 = sol.h1(t)
    path = output.write_columns(out / "closed_form.csv", {
        "t": t, "E": sol.E(t), "Eprime": sol.E_prime(t), "h0": sol.h0(t), "h1": h1,
        "neg_h1": -h1, "h2": sol.h2(t), "mu": sol.mu(t),
    })
    tm = find_slope_reversal(sol)
    results = {"E_T": float(sol.E(scn.market.T)), "t_m": tm, "h1_0": float(h1[0]), "theta": sol.theta}
    return {"grid_n": n, "published_sign": published}, [path], results


def run_hetero(scn: Scenario, opts: dict, out: Path):
    n = int(_pick(opts, "grid_n", scn.grid.get("N"), 2000))
    method = _pick(opts, "method", scn.solver.get("method"), "direct")
    tol = float(_pick(opts, "tol", scn.solver.get("tol"), 1e-10))
    max_iter = int(_pick(opts, "max_iter", scn.solver.get("max_iter"), 10_000))
    damping = float(_pick(opts, "damping", scn.solver.get("damping"), 1.0))
    grid = TimeGrid(scn.market.T, n)
    if method == "direct":
        flow = solve_direct(scn.market, scn.pop, grid)
    elif method == "picard":
        flow = solve_picard(scn.market, scn.pop, grid, tol=tol, max_iter=max_iter, damping=damping)
    else:
        raise ScenarioError(f"unknown method {method!r} (expected direct or picard)")
    cols = {"t": grid.nodes, "mu": flow.mu}
    for k in range(len(scn.pop)):
        ts = recover_type_solution(scn.market, scn.pop, k, flow)
        cols[f"E_{k}"] = ts.E
        cols[f"h1_{k}"] = ts.h1
    path = output.write_columns(out / "hetero.csv", cols)
    results = {
        "iterations": flow.iterations, "residual": flow.residual,
        "contraction_estimate": estimate_contraction(scn.market, scn.pop, grid),
    }
    resolved = {"grid_n": n, "method": method, "tol": tol, "max_iter": max_iter, "damping": damping}
    return resolved, [path], results


def run_learn(scn: Scenario, opts: dict, out: Path):
    ln = scn.learning
    n = int(_pick(opts, "grid_n", scn.grid.get("N"), 200))
    c = _pick(opts, "c", ln.get("c"), [1.0])
    c = [float(x) for x in (c if isinstance(c, (list, tuple)) else [c])]
    config = LearningConfig(
        rounds=int(_pick(opts, "rounds", ln.get("rounds"), 10_000)),
        c=tuple(c),
        C=float(_pick(opts, "C", ln.get("C"), max(max(c), 1.0 / min(c), 1.0))),
        eps=float(_pick(opts, "eps", ln.get("eps"), 0.0)),
        seed=int(_pick(opts, "seed", ln.get("seed"), 0)),
    )
    grid = TimeGrid(scn.market.T, n)
    trace = run_learning(scn.market, scn.pop, grid, config)
    cols = {"round": np.arange(1, config.rounds + 1), "sup_error": trace.errors}
    if len(scn.pop) > 1:
        for k in range(len(scn.pop)):
            cols[f"error_{k}"] = trace.type_errors[:, k]
    files = [output.write_columns(out / "learn.csv", cols)]
    bcols = {"t": grid.nodes, "mu_star": trace.mu_star}
    for k in range(len(scn.pop)):
        bcols[f"belief_{k}"] = trace.beliefs[k]
    files.append(output.write_columns(out / "beliefs.csv", bcols))
    below = np.nonzero(trace.errors <= 1e-4)[0]
    results = {
        "final_error": float(trace.errors[-1]),
        "first_round_below_1e-4": int(below[0] + 1) if below.size else None,
        "tail_max": trace.tail_max(),
        "c_emp": trace.c_emp,
    }
    resolved = {
        "grid_n": n, "rounds": config.rounds, "c": list(config.c), "C": config.C,
        "eps": config.eps, "seed": config.seed,
    }
    return resolved, files, results


def run_pde(scn: Scenario, opts: dict, out: Path):
    n_t = int(_pick(opts, "grid_n", scn.grid.get("N"), 2000))
    n_q = int(_pick(opts, "n_q", scn.grid.get("n_q"), 400))
    tol = float(_pick(opts, "tol", scn.solver.get("tol"), 1e-8))
    max_iter = int(_pick(opts, "max_iter", scn.solver.get("max_iter"), 200))
    damping = float(_pick(opts, "damping", scn.solver.get("damping"), 0.5))
    dump = bool(opts.get("dump", False))
    grid = default_grid(scn.market, scn.pop, n_t, n_q)
    state = solve_mfg_fixed_point(scn.market, scn.pop, grid, tol=tol, max_iter=max_iter, damping=damping)
    cols = {"t": grid.t, "mu": state.mu, "first_moment": state.mean_inventory(scn.pop)}
    if scn.homogeneous:
        cols["E_closed_form"] = _homogeneous_solution(scn).E(grid.t)
    moments, masses = state.first_moment(), state.mass()
    for k in range(len(scn.pop)):
        cols[f"mean_{k}"] = moments[k]
        cols[f"mass_{k}"] = masses[k]
    files = [output.write_columns(out / "pde.csv", cols)]
    if dump:
        files.append(out / "fields.bin")
        dump_fields(files[-1], state)
    results = {
        "iterations": state.iterations, "residual": state.residual, "leak": state.leak,
        "q_min": grid.q_min, "q_max": grid.q_max, "history": list(state.history),
    }
    resolved = {"grid_n": n_t, "n_q": n_q, "tol": tol, "max_iter": max_iter, "damping": damping, "dump": dump}
    return resolved, files, results


def run_simulate(scn: Scenario, opts: dict, out: Path):
    sim = scn.simulation
    n = int(_pick(opts, "grid_n", scn.grid.get("N"), 200))
    config = SimConfig(
        paths=int(_pick(opts, "paths", sim.get("paths"), 10_000)),
        agents_per_type=int(_pick(opts, "agents", sim.get("agents_per_type"), 1)),
        steps=_pick(opts, "steps", sim.get("steps")),
        seed=int(_pick(opts, "seed", sim.get("seed"), 0)),
        S0=float(_pick(opts, "S0", sim.get("S0"), 0.0)),
        store_paths=False,
    )
    bad = config.violations()
    if bad:
        raise ScenarioError("; ".join(bad))
    grid = TimeGrid(scn.market.T, n)
    sol = None
    if scn.homogeneous:
        sol = _homogeneous_solution(scn)
        fb = feedback_from_closed_form(sol, grid, len(scn.pop))
    else:
        fb = feedback_from_flow(scn.market, scn.pop, solve_direct(scn.market, scn.pop, grid))
    summary = simulate(scn.market, scn.pop, fb, config)

    rows = []
    for k in range(len(scn.pop)):
        for i, t in enumerate(summary.t):
            q = summary.Q_quantiles[k, :, i]
            rows.append((t, k, summary.Q_mean[k, i], q[0], q[1], q[2], summary.S_mean[i]))
    files = [output.write_csv(
        out / "simulate_paths.csv", ["t", "type", "Q_mean", "Q_q05", "Q_q50", "Q_q95", "S_mean"], rows
    )]
    orows = []
    for k, typ in enumerate(scn.pop.types):
        ref = expected_value(sol, config.S0, typ.spread, typ.pref.E0) if sol is not None else None
        z = (summary.mean_J[k] - ref) / summary.se_J[k] if ref is not None else None
        orows.append((k, summary.mean_J[k], summary.se_J[k], ref, z))
    files.append(output.write_csv(out / "objective.csv", ["type", "mean_J", "se_J", "expected_J", "z"], orows))

    if opts.get("dump_paths"):
        ens = summary.ensemble
        prow = [(p, a, ens.agent_type[a], ens.J[p, a]) for p in range(ens.J.shape[0]) for a in range(ens.J.shape[1])]
        files.append(output.write_csv(out / "path_objectives.csv", ["path", "agent", "type", "J"], prow))

    results = {"mean_J": summary.mean_J, "se_J": summary.se_J}
    if opts.get("deviation"):
        e0 = scn.pop.types[0].pref.E0
        perts = [Perturbation(0.8), Perturbation(1.2)]
        if e0 != 0:
            off = 0.1 * abs(e0) / scn.market.T
            perts += [Perturbation(offset=off), Perturbation(offset=-off)]
        drows = []
        for p in perts:
            rep = deviation_test(scn.market, scn.pop, fb, config, p, base=summary.ensemble)
            drows.append((p.factor, p.offset, rep.mean_optimal, rep.mean_deviated, rep.mean_diff,
                          rep.se_diff, rep.z, rep.worse()))
        files.append(output.write_csv(
            out / "deviation.csv",
            ["factor", "offset", "mean_J_optimal", "mean_J_deviated", "mean_diff", "se_diff", "z", "worse_3sigma"],
            drows,
        ))
        results["deviations_all_worse"] = all(r[-1] for r in drows)
    resolved = {
        "grid_n": n, "paths": config.paths, "agents": config.agents_per_type, "steps": config.steps,
        "seed": config.seed, "S0": config.S0, "deviation": bool(opts.get("deviation")),
        "dump_paths": bool(opts.get("dump_paths")),
    }
    return resolved, files, results


def _axis(spec) -> np.ndarray:
    lo, hi, count = spec
    return np.array([lo]) if count == 1 else np.linspace(lo, hi, int(count))


def run_sweep_tm(scn: Scenario, opts: dict, out: Path):
    box = dict(DEFAULT_SWEEP)
    box.update(scn.sweep)
    for key in ("alpha", "kappa", "phi"):
        if opts.get(key) is not None:
            box[key] = opts[key]
    published = bool(opts.get("published_sign", False))
    A, T, E0 = float(box["A"]), float(box["T"]), float(box["E0"])
    points = [(phi, a, k) for phi in _axis(box["phi"]) for a in _axis(box["alpha"]) for k in _axis(box["kappa"])]

    def one(point):
        phi, alpha, kappa = point
        sol = solve_homogeneous(
            MarketParams(alpha, kappa, 0.0, T), Preference(phi, A, E0),
            sign_convention="published" if published else "terminal",
        )
        return (phi, alpha, kappa, find_slope_reversal(sol))

    with ThreadPoolExecutor(thread_count()) as pool:
        rows = sorted(pool.map(one, points), key=lambda r: r[:3])
    path = output.write_csv(out / "sweep_tm.csv", ["phi", "alpha", "kappa", "t_m"], rows)
    counts = {}
    for phi, _, _, tm in rows:
        counts[phi] = counts.get(phi, 0) + (tm is not None)
    phis = sorted(counts)
    monotone = all(counts[a] >= counts[b] for a, b in zip(phis, phis[1:]))
    results = {"counts_by_phi": [[float(p), counts[p]] for p in phis], "region_grows_as_phi_decreases": monotone}
    resolved = {
        "alpha": list(box["alpha"]), "kappa": list(box["kappa"]), "phi": list(box["phi"]),
        "A": A, "T": T, "E0": E0, "published_sign": published,
    }
    return resolved, [path], results


RUNNERS = {
    "closed-form": run_closed_form,
    "hetero": run_hetero,
    "learn": run_learn,
    "pde": run_pde,
    "simulate": run_simulate,
    "sweep-tm": run_sweep_tm,
}


def execute(command: str, scn: Scenario, opts: dict, out, scenario_path=None) -> dict:
    """Run one command and write its manifest. Raises on failure."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    resolved, files, results = RUNNERS[command](scn, opts, out)
    wall = time.perf_counter() - start
    manifest = {
        "tool": {"name": "mfgexec", "version": __version__},
        "command": command,
        "scenario": {"name": scn.name, "path": str(scenario_path) if scenario_path else None, "text": scn.text},
        "options": resolved,
        "seed": resolved.get("seed"),
        "threads": thread_count(),
        "wall_time_s": wall,
        "platform": {"python": platform.python_version(), "numpy": np.__version__},
        "outputs": [
            {"file": Path(f).name, "bytes": Path(f).stat().st_size, "sha256": output.sha256(f)} for f in files
        ],
        "results": results,
    }
    output.write_manifest(out, manifest)
    return manifest


# ---------------------------------------------------------------------------
# click wrappers


def _range(ctx, param, value):
    if value is None:
        return None
    try:
        lo, hi, count = value.split(":")
        return (float(lo), float(hi), int(count))
    except ValueError:
        raise click.BadParameter("expected lo:hi:count") from None


def _common(f):
    options = [
        click.option("--scenario", "scenario_path", required=True, type=click.Path(dir_okay=False),
                     help="TOML scenario file."),
        click.option("--out", "out", default="out", show_default=True, type=click.Path(file_okay=False),
                     help="Output directory."),
        click.option("--grid-n", type=int, help="Number of time steps."),
        click.option("--seed", type=int, help="Random seed."),
        click.option("--tol", type=float, help="Fixed-point tolerance."),
        click.option("--max-iter", type=int, help="Iteration cap."),
        click.option("--damping", type=float, help="Fixed-point damping in (0, 1]."),
        click.option("--threads", type=int, help=f"Worker threads (overrides {THREADS_ENV})."),
    ]
    for opt in reversed(options):
        f = opt(f)
    return f


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    if isinstance(exc, NumericalError):
        sys.exit(EXIT_NUMERICAL)
    sys.exit(EXIT_SCENARIO)


def _dispatch(command: str, scenario_path, out, opts: dict) -> None:
    threads = opts.pop("threads", None)
    if threads is not None:
        os.environ[THREADS_ENV] = str(threads)
    try:
        scn = load_scenario(scenario_path)
        manifest = execute(command, scn, opts, out, scenario_path)
    except (ScenarioError, NumericalError) as exc:
        _fail(exc)
    except (ValueError, MfgError) as exc:
        _fail(ScenarioError(str(exc)))
    for key, value in manifest["results"].items():
        if key != "history":
            click.echo(f"{key}: {value}")
    click.echo(f"wrote {len(manifest['outputs'])} file(s) and {output.MANIFEST_NAME} to {out}")


@click.group()
@click.version_option(__version__, prog_name="mfgexec")
@click.option("-v", "--verbose", count=True, help="Log progress (-vv for debug).")
def main(verbose):
    """Equilibria of the mean-field optimal execution game."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command("closed-form")
@_common
@click.option("--published-sign", is_flag=True, help="Use the flipped mixing coefficient (diagnostic only).")
def closed_form_cmd(scenario_path, out, **opts):
    """Closed-form E, h0, h1, h2 and mu on the time grid."""
    _dispatch("closed-form", scenario_path, out, opts)


@main.command()
@_common
@click.option("--method", type=click.Choice(["direct", "picard"]))
def hetero(scenario_path, out, **opts):
    """Equilibrium flow of a matched-penalty mixture."""
    _dispatch("hetero", scenario_path, out, opts)


@main.command()
@_common
@click.option("--rounds", type=int)
@click.option("--eps", type=float, help="Noise half-width.")
@click.option("--c", "c", type=float, multiple=True, help="Learning-rate constant (repeat per type).")
@click.option("--C", "C", type=float, help="Bound C with 1/C <= c_k <= C.")
def learn(scenario_path, out, **opts):
    """Learning dynamics towards the equilibrium flow."""
    if not opts["c"]:
        opts["c"] = None
    _dispatch("learn", scenario_path, out, opts)


@main.command()
@_common
@click.option("--n-q", type=int, help="Number of inventory cells.")
@click.option("--dump", is_flag=True, help="Also write the (v, m) fields to fields.bin.")
def pde(scenario_path, out, **opts):
    """Grid solution of the coupled value/density system."""
    _dispatch("pde", scenario_path, out, opts)


@main.command("simulate")
@_common
@click.option("--paths", type=int)
@click.option("--agents", type=int, help="Agents per type and path.")
@click.option("--steps", type=int, help="Integration steps (default 10x grid).")
@click.option("--S0", "S0", type=float, help="Initial price.")
@click.option("--deviation", is_flag=True, help="Run the paired deviation tests.")
@click.option("--dump-paths", is_flag=True, help="Write per-path objectives.")
def simulate_cmd(scenario_path, out, **opts):
    """Monte Carlo population under the equilibrium feedback."""
    _dispatch("simulate", scenario_path, out, opts)


@main.command("sweep-tm")
@_common
@click.option("--alpha", callback=_range, help="lo:hi:count")
@click.option("--kappa", callback=_range, help="lo:hi:count")
@click.option("--phi", callback=_range, help="lo:hi:count")
@click.option("--published-sign", is_flag=True, help="Use the flipped mixing coefficient.")
def sweep_tm(scenario_path, out, **opts):
    """Slope-reversal time over a (phi, alpha, kappa) box."""
    _dispatch("sweep-tm", scenario_path, out, opts)


@main.command()
@click.option("--scenario", "scenario_path", required=True, type=click.Path(dir_okay=False))
def validate(scenario_path):
    """Check a scenario and report hetero eligibility per type."""
    try:
        scn = load_scenario(scenario_path, strict=False)
    except ScenarioError as exc:
        _fail(exc)
    report = validate_scenario(scn.market, scn.pop)
    for line in report.lines():
        click.echo(line)
    click.echo("ok" if report.ok else f"{len(report.violations)} violation(s)")
    if not report.ok:
        sys.exit(EXIT_SCENARIO)


@main.command()
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--out", "out", required=True, type=click.Path(file_okay=False))
def replay(manifest, out):
    """Re-run the command recorded in MANIFEST into --out."""
    data = output.read_manifest(manifest)
    try:
        scn = parse_scenario(data["scenario"]["text"], name=data["scenario"]["name"])
        opts = dict(data["options"])
        for key in ("alpha", "kappa", "phi"):
            if isinstance(opts.get(key), list):
                opts[key] = tuple(opts[key])
        result = execute(data["command"], scn, opts, out, data["scenario"].get("path"))
    except (ScenarioError, NumericalError) as exc:
        _fail(exc)
    except (KeyError, ValueError, MfgError) as exc:
        _fail(ScenarioError(f"bad manifest: {exc}"))
    click.echo(f"replayed {data['command']}: {len(result['outputs'])} file(s) in {out}")


if __name__ == "__main__":  # pragma: no cover
    main()
