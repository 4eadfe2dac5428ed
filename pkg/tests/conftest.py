import numpy as np
import pytest

from panelflow.plate_core import build_grid


@pytest.fixture(scope="session")
def grid15():
    return build_grid(1.0, 1.0, 15, 15)


@pytest.fixture(scope="session")
def grid31():
    return build_grid(1.0, 1.0, 31, 31)


def clamped_bump(grid, power=2):
    X, Y = grid.mesh()
    return (np.sin(np.pi * X / grid.L1) * np.sin(np.pi * Y / grid.L2)) ** power


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
