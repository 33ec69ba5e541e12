import numpy as np
import pytest

from erf.scene import Aabb, create_dense_grid, init_random
from erf.synthetic import make_synthetic_scene

UNIT_BOX = Aabb([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])


def random_model(depth=2, bands=2, seed=0, dtype=np.float64, mode="opacity", box=UNIT_BOX,
                 res=4):
    model = create_dense_grid(box, depth, bands, res, dtype=dtype)
    return init_random(model, seed, mode)


@pytest.fixture(scope="session")
def tiny_cube():
    """Small synthetic checkered cube dataset and its analytic scene."""
    return make_synthetic_scene("checkered_cube", 6, 2, 24, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion."""
    def record(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
