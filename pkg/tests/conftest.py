import numpy as np
import pytest

from stochtransport.geometry import build_geometry
from stochtransport.tree import build_tree


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(12345))


@pytest.fixture
def line():
    return build_geometry(1, (-0.5, 0.5), 8)


@pytest.fixture
def disk():
    return build_geometry(2, 0.5, 4, n_vel=4)


@pytest.fixture
def small_tree():
    return build_tree(1.0, 4)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion."""

    def _report(label: str, ok: bool, detail: str) -> bool:
        line = f"{label}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
