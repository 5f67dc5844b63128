import numpy as np
import pytest

from levy_fbsde.noise import JumpMeasure, make_grid

TWO_ATOMS = JumpMeasure(np.array([1.0, -0.5]), np.array([1.0, 2.0]))


@pytest.fixture
def two_atoms():
    return TWO_ATOMS


@pytest.fixture
def grid16():
    return make_grid(1.0, 16)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
