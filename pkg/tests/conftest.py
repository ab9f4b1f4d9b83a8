import numpy as np
import pytest

from acsweep.instability import calibrate
from acsweep.manifold_scenarios import make_scenario
from acsweep.sweepout import SweepoutBuilder


@pytest.fixture(scope="session")
def s2_unit():
    return make_scenario("sphere2", 1.0, 628, 64)


@pytest.fixture(scope="session")
def s2_coarse():
    """S^2(3) at h = eps/4 for eps = 0.04, with a coarse tangential grid."""
    return make_scenario("sphere2", 3.0, 944, 64)


@pytest.fixture(scope="session")
def s2_plan(s2_coarse):
    return calibrate(s2_coarse)


@pytest.fixture(scope="session")
def s2_builder(s2_coarse, s2_plan):
    return SweepoutBuilder(s2_coarse, 0.04, s2_plan)


@pytest.fixture(scope="session")
def s2_folded_builder(s2_plan):
    sc = make_scenario("sphere2", 3.0, 944, 64, folded=True)
    return SweepoutBuilder(sc, 0.04, s2_plan)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed", "xfailed", "xpassed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", "call") == "call":
                lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
