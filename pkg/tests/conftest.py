import numpy as np
import pytest

from pdpocp.grid import TimeGrid
from pdpocp.models import make_double_integrator, make_free_flying_robot


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def di():
    return make_double_integrator()


@pytest.fixture(scope="session")
def ffr():
    return make_free_flying_robot()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def euler_reference(f, x0, U, dt):
    """Plain forward-Euler loop used as an independent simulator."""
    x = np.array(x0, dtype=float)
    out = [x.copy()]
    for u in U:
        x = x + dt * np.asarray(f(x, u))
        out.append(x.copy())
    return np.array(out)


def ffr_rhs(x, u):
    s = u[0] + u[1]
    return [x[3], x[4], x[5], s * np.cos(x[2]), s * np.sin(x[2]), 0.2 * (u[0] - u[1])]


def di_rhs(x, u):
    return [x[1], u[0]]


__all__ = ["ACCEPTANCE", "euler_reference", "ffr_rhs", "di_rhs", "TimeGrid"]
