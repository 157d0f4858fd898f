import numpy as np
import pytest

from ibctrl.discrete import solve
from ibctrl.experiments.montecarlo import LavaPolicies, SlipPolicies
from ibctrl.experiments.scenarios import load_scenario


@pytest.fixture(scope="session")
def lava_scn():
    return load_scenario("lava")


@pytest.fixture(scope="session")
def lava_solution(lava_scn):
    sys = lava_scn.system()
    return sys, solve(sys, lava_scn.solver_options())


@pytest.fixture(scope="session")
def lava_pols(lava_scn, lava_solution):
    return LavaPolicies.build(lava_scn, lava_solution[1])


@pytest.fixture(scope="session")
def slip_scn():
    return load_scenario("slip")


@pytest.fixture(scope="session")
def slip_pols(slip_scn):
    # the NLG solve plus the iLQG baseline take about half a minute
    return SlipPolicies.build(slip_scn)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the run
CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str):
        CRITERIA[number] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
