import numpy as np
import pytest

from thinlevy.endgame import build_endgame
from thinlevy.process import ModelParams
from thinlevy.ratefn import solve_theta_star


@pytest.fixture(scope="session")
def params():
    return ModelParams(tau=3.5, beta_tilde=0.0)


@pytest.fixture(scope="session")
def table(params):
    return solve_theta_star(params)


@pytest.fixture(scope="session")
def endgame(table):
    return build_endgame(table)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one pass/fail line; the lines are printed after the run."""
    def _report(tag: str, ok: bool, detail: str) -> bool:
        _ACCEPTANCE_LINES.append(f"{tag:<34} {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
