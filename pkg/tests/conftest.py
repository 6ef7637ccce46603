import shutil

import numpy as np
import pytest

from cpwlfit.dataset import DataSet
from cpwlfit.errors import SolverError
from cpwlfit.solver import SolverSpec, find_executable


def _have(backend):
    try:
        find_executable(SolverSpec(backend=backend))
        return True
    except SolverError:
        return False


HAVE_HIGHS = _have("highs")
HAVE_CBC = _have("cbc")

needs_highs = pytest.mark.skipif(not HAVE_HIGHS, reason="HiGHS executable not available")
needs_cbc = pytest.mark.skipif(not HAVE_CBC, reason="CBC executable not available")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def line_data():
    # four points on y = x with +-0.1 noise pattern
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    z = np.array([0.0, 1.1, 1.9, 3.0])
    return DataSet(X, z, "line")


def random_instance(rng, N, d, name="rand"):
    X = rng.uniform(0, 1, (N, d))
    z = np.sin(3 * X[:, 0]) + (X[:, 1:] ** 2).sum(axis=1)
    return DataSet(X, z, name)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
