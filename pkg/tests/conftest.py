import numpy as np
import pytest

from mlest.experiments import build_problem
from mlest.mesh import build_hierarchy


@pytest.fixture(scope="session")
def problem_3d():
    """3D, cells0=6, J=1 manufactured problem (125 -> 1331 unknowns)."""
    return build_problem(3, 6, 1)


@pytest.fixture(scope="session")
def problem_2d():
    """2D, cells0=4, J=2 manufactured problem."""
    return build_problem(2, 4, 2)


@pytest.fixture(scope="session")
def hier_3d():
    return build_hierarchy(3, 6, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_record():
    """Record (and print) one PASS/FAIL line for an acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
