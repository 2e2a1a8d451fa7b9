import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pdrkit.elliptic import EllipticOperator
from pdrkit.fields import Grid2D, ScalarField, SymMatrixField
from pdrkit.measure import solve_background
from pdrkit.scenarios import bump_profile, load_config

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")
SQ1_CONFIG = os.path.join(CONFIG_DIR, "sq1_bump.ini")
VARIABLE_CONFIG = os.path.join(CONFIG_DIR, "variable_background.ini")

settings.register_profile("pdrkit", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pdrkit")


def sq1_background(cells: int):
    """Identity background with data ``(x, y, (x^2 - y^2)/2)``."""
    grid = Grid2D.unit_square(cells + 1)
    X, Y = grid.meshgrid()
    op = EllipticOperator(SymMatrixField.identity(grid))
    g = [ScalarField(grid, X), ScalarField(grid, Y), ScalarField(grid, 0.5 * (X**2 - Y**2))]
    return solve_background(op, g)


def variable_background(cells: int):
    cfg = load_config(VARIABLE_CONFIG)
    grid = cfg.grid(cells)
    op = EllipticOperator(cfg.gamma0_field(grid))
    return solve_background(op, cfg.boundary_fields(grid))


def bump_gamma(grid, matrix=(1.0, 0.5, 2.0), center=(0.5, 0.5), radius=0.2, power=4):
    X, Y = grid.meshgrid()
    prof = bump_profile(X, Y, center, radius, power)
    return SymMatrixField(grid, prof[..., None] * np.asarray(matrix, dtype=float))


@pytest.fixture(scope="session")
def sq1_32():
    return sq1_background(32)


@pytest.fixture(scope="session")
def sq1_64():
    return sq1_background(64)


@pytest.fixture(scope="session")
def var_64():
    return variable_background(64)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
