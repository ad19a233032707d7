import math
from pathlib import Path

import pytest

from mfgexec.model import AgentType, MarketParams, PopulationSpec, Preference

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture
def reference_market():
    return MarketParams(alpha=0.4, kappa=0.2, sigma=0.0, T=5.0)


@pytest.fixture
def reference_pref():
    return Preference(phi=0.1, A=2.5, E0=10.0)


@pytest.fixture
def matched_pref():
    return Preference(phi=0.1, A=math.sqrt(0.02), E0=10.0)


@pytest.fixture
def two_types():
    kappa = 0.2
    return PopulationSpec((
        AgentType(0.5, Preference(0.1, math.sqrt(kappa * 0.1), 6.0)),
        AgentType(0.5, Preference(0.4, math.sqrt(kappa * 0.4), 4.0)),
    ))


@pytest.fixture
def scenarios_dir():
    return SCENARIOS
