import numpy as np
import pytest
from conftest import SQ1_CONFIG, VARIABLE_CONFIG

from pdrkit.fieldio import write_field
from pdrkit.fields import Grid2D, ScalarField, SymMatrixField
from pdrkit.scenarios import (SQ1_BUMP, ConfigError, bump_profile, diagonal_polynomial_tensor, load_config,
                              parse_config, sq1_bump)


def test_sq1_template_defaults():
    cfg = sq1_bump(32)
    assert cfg.cells == (32, 32) and cfg.grid().shape == (33, 33)
    assert cfg.c0 == 1e-6 and cfg.sigma_min == 1e-6 and cfg.method == "direct" and cfg.seed == 0
    assert cfg.resolutions == (32, 64, 128)
    assert cfg.check("min_order") == 1.5 and cfg.check("rel_l2_gamma_max") is None
    assert not cfg.file_based


def test_shipped_configs_parse():
    a, b = load_config(SQ1_CONFIG), load_config(VARIABLE_CONFIG)
    assert a.check("rel_l2_gamma_max") == 0.05
    assert b.background.kind == "diagonal-polynomial"


def test_diagonal_polynomial_background():
    cfg = load_config(VARIABLE_CONFIG)
    grid = cfg.grid(8)
    X, _ = grid.meshgrid()
    g = cfg.gamma0_field(grid).values
    assert np.allclose(g[..., 0], 1 + X**2 / 2) and np.all(g[..., 1] == 0) and np.allclose(g[..., 2], 1)
    an = cfg.background.analytic()
    assert np.allclose(an.gradient(np.array([0.4, 0.1]))[0][0, 0], 0.4)


def test_polynomial_tensor_derivatives():
    t = diagonal_polynomial_tensor((1, 2, 3, 4, 5, 6), (1, 0, 0, 0, 0, 0))
    x = np.array([0.3, 0.7])
    h = 1e-6
    fd = (t.value(x + [h, 0]) - t.value(x - [h, 0])) / (2 * h)
    assert np.abs(t.gradient(x)[0] - fd).max() < 1e-8
    assert t.hessian(x)[0, 0][0, 0] == pytest.approx(8.0)


def test_boundary_quadratic():
    cfg = sq1_bump(8)
    grid = cfg.grid()
    X, Y = grid.meshgrid()
    g = cfg.boundary_fields(grid)
    assert np.allclose(g[2].values, 0.5 * (X**2 - Y**2))


def test_bump_profile_support():
    grid = Grid2D.unit_square(65)
    X, Y = grid.meshgrid()
    p = bump_profile(X, Y, (0.5, 0.5), 0.2, 4)
    assert p.max() == pytest.approx(1.0)
    assert np.all(p[np.abs(X - 0.5) >= 0.2] == 0) and np.all(p[grid.boundary_mask()] == 0)


def _broken(old, new):
    return SQ1_BUMP.format(cells=16).replace(old, new)


@pytest.mark.parametrize("text", [
    _broken("[grid]", "[gird]"),
    _broken("cells = 16", "cells = sixteen"),
    _broken("cells = 16", "cells = 1"),
    _broken("kind = constant", "kind = spline"),
    _broken("matrix = 1, 0, 1", "matrix = 1, 0"),
    _broken("radius = 0.2", "radius = -1"),
    _broken("q = 1, 0, -1", "q = a, b, c"),
    _broken("extent = 0, 0, 1, 1", "extent = 0, 0, 0, 1"),
    _broken("power = 4", "power = 4\ncolour = red"),
    SQ1_BUMP.format(cells=16) + "\n[noise]\nrelative_amplitude = -1\n",
    SQ1_BUMP.format(cells=16) + "\n[solver]\nmethod = gmres\n",
    SQ1_BUMP.format(cells=16) + "\n[extras]\nx = 1\n",
    "not an ini file",
], ids=["unknown-section", "non-numeric-cells", "too-few-cells", "unknown-kind", "short-matrix",
        "negative-radius", "non-numeric-q", "empty-extent", "unknown-key", "negative-noise",
        "bad-solver", "extra-section", "not-ini"])
def test_malformed_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


def test_file_based_fields(tmp_path):
    grid = Grid2D.unit_square(9)
    X, Y = grid.meshgrid()
    write_field(SymMatrixField.constant(grid, 2.0, 0.0, 1.0), tmp_path / "g0.pdf1")
    for k, f in enumerate((X, Y, X * Y)):
        write_field(ScalarField(grid, f), tmp_path / f"u{k}.pdf1")
    write_field(SymMatrixField.zeros(grid), tmp_path / "gam.pdf1")
    text = ("[grid]\ncells = 8\nextent = 0, 0, 1, 1\n[background]\nkind = file\npath = g0.pdf1\n"
            "[boundary]\nkind = file\npaths = u0.pdf1, u1.pdf1, g0.pdf1\n"
            "[perturbation]\nkind = file\npath = gam.pdf1\n")
    (tmp_path / "c.ini").write_text(text)
    cfg = load_config(tmp_path / "c.ini")
    assert cfg.file_based
    assert np.allclose(cfg.gamma0_field(grid).values[..., 0], 2.0)
    with pytest.raises(ConfigError):
        cfg.boundary_fields(grid)            # g0.pdf1 holds a tensor field
    assert not np.any(cfg.gamma_field(grid).values)
    with pytest.raises(ConfigError):
        cfg.gamma0_field(Grid2D.unit_square(5))
