import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fplearn.grid import Grid
from fplearn.measure import DensityField

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_interior_density(grid: Grid, rng, floor=0.2) -> DensityField:
    m = np.where(grid.interior, rng.random(grid.size) + floor, 0.0)
    return DensityField(grid, m / m.sum())


@pytest.fixture
def grid8():
    return Grid.uniform(-2.0, 2.0, 8, 2)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion (call before asserting)."""
    def _report(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
