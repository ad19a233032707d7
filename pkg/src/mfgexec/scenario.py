"""TOML scenario files.

A scenario looks like::

    name = "reference"

    [market]
    alpha = 0.4
    kappa = 0.2
    sigma = 0.0
    T = 5.0

    [[population]]          # one table per type
    weight = 1.0
    phi = 0.1
    A = 2.5                 # or "matched" for sqrt(kappa*phi)
    E0 = 10.0
    spread = 0.25           # optional Gaussian stdev of initial inventory

    [grid]                  # all optional
    N = 2000
    n_q = 400

    [solver]                # optional: tol, max_iter, damping, method
    [learning]              # optional: rounds, c, C, eps, seed
    [simulation]            # optional: paths, agents_per_type, steps, seed, S0
    [sweep]                 # optional: alpha/kappa/phi = [lo, hi, count], A, T, E0

Errors carry the line of the offending key when it can be located.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .errors import ScenarioError
from .model import AgentType, MarketParams, PopulationSpec, Preference

_SECTIONS = {
    "market": {"alpha", "kappa", "sigma", "T"},
    "population": {"weight", "phi", "A", "E0", "spread"},
    "grid": {"N", "n_q"},
    "solver": {"tol", "max_iter", "damping", "method"},
    "learning": {"rounds", "c", "C", "eps", "seed"},
    "simulation": {"paths", "agents_per_type", "steps", "seed", "S0"},
    "sweep": {"alpha", "kappa", "phi", "A", "T", "E0"},
}


@dataclass(frozen=True)
class Scenario:
    name: str
    market: MarketParams
    pop: PopulationSpec
    grid: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    learning: dict = field(default_factory=dict)
    simulation: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    text: str = ""

    @property
    def homogeneous(self) -> bool:
        return len({(t.pref.phi, t.pref.A) for t in self.pop.types}) == 1


class _Locator:
    """Finds the source line of ``key`` inside a given table."""

    _header = re.compile(r"^\s*(\[\[?)\s*([A-Za-z0-9_.\-]+)\s*\]\]?")

    def __init__(self, text: str):
        self.entries = []  # (table, index, key, line)
        table, index, counts = "", 0, {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            m = self._header.match(raw)
            if m:
                table = m.group(2)
                if m.group(1) == "[[":
                    counts[table] = counts.get(table, -1) + 1
                    index = counts[table]
                else:
                    index = 0
                self.entries.append((table, index, None, lineno))
                continue
            km = re.match(r"^\s*([A-Za-z0-9_\-]+)\s*=", raw)
            if km:
                self.entries.append((table, index, km.group(1), lineno))

    def line(self, table: str, key: str | None = None, index: int = 0) -> int | None:
        for t, i, k, ln in self.entries:
            if t == table and i == index and k == key:
                return ln
        if key is not None:
            return self.line(table, None, index)
        return None


def _number(value, what: str, line, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{what} must be a number, got {value!r}", line)
    if integer:
        if isinstance(value, float) and not value.is_integer():
            raise ScenarioError(f"{what} must be an integer, got {value!r}", line)
        return int(value)
    if not math.isfinite(value):
        raise ScenarioError(f"{what} must be finite", line)
    return float(value)


def parse_scenario(text: str, name: str = "scenario", strict: bool = True) -> Scenario:
    """Parse scenario text.

    With ``strict=False`` only structural problems (syntax, unknown keys,
    non-numeric values) raise; parameter-range problems are left for
    :func:`~mfgexec.model.validate_scenario` to report all at once.
    """
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ScenarioError(f"malformed TOML: {exc}", int(m.group(1)) if m else None) from None
    loc = _Locator(text)

    for key in data:
        if key == "name":
            continue
        if key not in _SECTIONS:
            raise ScenarioError(f"unknown section or key {key!r}", loc.line("", key) or loc.line(key))
    for section, allowed in _SECTIONS.items():
        tables = data.get(section, {})
        tables = tables if isinstance(tables, list) else [tables]
        for i, tbl in enumerate(tables):
            if not isinstance(tbl, dict):
                raise ScenarioError(f"[{section}] must be a table", loc.line("", section))
            for key in tbl:
                if key not in allowed:
                    raise ScenarioError(
                        f"unknown key {key!r} in [{section}] (expected one of {sorted(allowed)})",
                        loc.line(section, key, i),
                    )

    if "market" not in data:
        raise ScenarioError("missing [market] section")
    mk = data["market"]
    for key in ("alpha", "kappa", "T"):
        if key not in mk:
            raise ScenarioError(f"[market] is missing {key!r}", loc.line("market"))
    market = MarketParams(
        alpha=_number(mk["alpha"], "alpha", loc.line("market", "alpha")),
        kappa=_number(mk["kappa"], "kappa", loc.line("market", "kappa")),
        sigma=_number(mk.get("sigma", 0.0), "sigma", loc.line("market", "sigma")),
        T=_number(mk["T"], "T", loc.line("market", "T")),
    )
    problems = market.violations() if strict else []
    if problems:
        key = problems[0].split()[0]
        raise ScenarioError("; ".join(problems), loc.line("market", key))

    pops = data.get("population")
    if not pops:
        raise ScenarioError("missing [[population]] entries")
    if isinstance(pops, dict):
        pops = [pops]
    types = []
    for i, tbl in enumerate(pops):
        where = f"population entry {i}"
        for key in ("phi", "A"):
            if key not in tbl:
                raise ScenarioError(f"{where} is missing {key!r}", loc.line("population", None, i))
        phi = _number(tbl["phi"], f"{where}: phi", loc.line("population", "phi", i))
        if tbl["A"] == "matched":
            A = math.sqrt(market.kappa * phi) if market.kappa * phi >= 0 else math.nan
        else:
            A = _number(tbl["A"], f"{where}: A", loc.line("population", "A", i))
        pref = Preference(
            phi=phi, A=A, E0=_number(tbl.get("E0", 0.0), f"{where}: E0", loc.line("population", "E0", i))
        )
        default_w = 1.0 if len(pops) == 1 else None
        if "weight" not in tbl and default_w is None:
            raise ScenarioError(f"{where} needs a weight", loc.line("population", None, i))
        weight = _number(tbl.get("weight", default_w), f"{where}: weight", loc.line("population", "weight", i))
        spread = _number(tbl.get("spread", 0.0), f"{where}: spread", loc.line("population", "spread", i))
        types.append(AgentType(weight, pref, spread))
        bad = pref.violations() if strict else []
        if strict and not weight > 0:
            bad.append("weight must be strictly positive")
        if strict and not spread >= 0:
            bad.append("spread must be nonnegative")
        if bad:
            key = bad[0].split()[0]
            raise ScenarioError(f"{where}: " + "; ".join(bad), loc.line("population", key, i))
    pop = PopulationSpec(tuple(types))
    bad = pop.violations() if strict else []
    if bad:
        raise ScenarioError("; ".join(bad), loc.line("population", "weight", 0))

    grid = dict(data.get("grid", {}))
    for key in ("N", "n_q"):
        if key in grid:
            grid[key] = _number(grid[key], key, loc.line("grid", key), integer=True)
            if grid[key] < 2:
                raise ScenarioError(f"grid {key} must be >= 2", loc.line("grid", key))

    sweep = dict(data.get("sweep", {}))
    for key in ("alpha", "kappa", "phi"):
        if key in sweep:
            r = sweep[key]
            ln = loc.line("sweep", key)
            if not (isinstance(r, list) and len(r) == 3):
                raise ScenarioError(f"sweep {key} must be [lo, hi, count]", ln)
            sweep[key] = (_number(r[0], key, ln), _number(r[1], key, ln), _number(r[2], key, ln, integer=True))
            if sweep[key][2] < 1:
                raise ScenarioError(f"sweep {key} count must be >= 1", ln)

    return Scenario(
        name=str(data.get("name", name)),
        market=market,
        pop=pop,
        grid=grid,
        solver=dict(data.get("solver", {})),
        learning=dict(data.get("learning", {})),
        simulation=dict(data.get("simulation", {})),
        sweep=sweep,
        text=text,
    )


def load_scenario(path, strict: bool = True) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc.strerror}") from None
    return parse_scenario(text, name=path.stem, strict=strict)
