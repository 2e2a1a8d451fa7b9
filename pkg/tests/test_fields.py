import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pdrkit.fields import (EllipticityError, Grid2D, GridError, ScalarField, SymMatrixField, decompose, det2,
                           gradient, h1_norm, hessian, inv2, l2_norm, pack_sym, relative_trace, sqrtm_spd,
                           tensor_divergence, unpack_sym)

finite = st.floats(-3.0, 3.0, allow_nan=False)


def spd_from(a):
    A = np.asarray(a).reshape(2, 2)
    return A.T @ A + 0.1 * np.eye(2)


def test_grid_geometry():
    g = Grid2D.unit_square(5)
    assert g.shape == (5, 5) and g.size == 25
    assert g.hx == pytest.approx(0.25) and g.hy == pytest.approx(0.25)
    assert g.boundary_mask().sum() == 16
    assert g.interior_mask().sum() == 9
    X, Y = g.meshgrid()
    assert X[0, -1] == pytest.approx(1.0) and Y[-1, 0] == pytest.approx(1.0)


def test_box_mask_is_inclusive():
    g = Grid2D.unit_square(5)
    m = g.box_mask(0.25, 0.25, 0.75, 0.75)
    assert m.sum() == 9


def test_too_small_grid_rejected():
    with pytest.raises(GridError):
        gradient(ScalarField(Grid2D.unit_square(2), np.zeros((2, 2))))


def test_field_grid_mismatch():
    a = ScalarField.zeros(Grid2D.unit_square(5))
    b = ScalarField.zeros(Grid2D.unit_square(6))
    with pytest.raises(GridError):
        a + b


def test_gradient_of_linear_is_exact():
    g = Grid2D.unit_square(9)
    X, _ = g.meshgrid()
    d = gradient(ScalarField(g, X)).values
    assert np.abs(d[..., 0] - 1).max() < 1e-12 and np.abs(d[..., 1]).max() < 1e-12


def test_gradient_of_quadratic_is_exact():
    g = Grid2D.unit_square(9)
    X, Y = g.meshgrid()
    d = gradient(ScalarField(g, 0.5 * (X**2 - Y**2))).values
    assert np.abs(d[..., 0] - X).max() < 1e-12 and np.abs(d[..., 1] + Y).max() < 1e-12


@pytest.mark.parametrize("fn,expected", [
    (lambda X, Y: 0.5 * (X**2 - Y**2), (1.0, 0.0, -1.0)),
    (lambda X, Y: X * Y, (0.0, 1.0, 0.0)),
])
def test_hessian_of_quadratics_is_exact(fn, expected):
    g = Grid2D.unit_square(9)
    X, Y = g.meshgrid()
    h = hessian(ScalarField(g, fn(X, Y))).values
    assert np.abs(h - np.array(expected)).max() < 1e-10


@given(arrays(float, 6, elements=finite))
def test_derivatives_exact_on_random_quadratics(c):
    g = Grid2D.unit_square(7)
    X, Y = g.meshgrid()
    f = c[0] + c[1] * X + c[2] * Y + c[3] * X**2 + c[4] * X * Y + c[5] * Y**2
    d = gradient(ScalarField(g, f)).values
    h = hessian(ScalarField(g, f)).values
    exact_d = np.stack([c[1] + 2 * c[3] * X + c[4] * Y, c[2] + c[4] * X + 2 * c[5] * Y], -1)
    assert np.abs(d - exact_d).max() < 1e-10
    assert np.abs(h - np.array([2 * c[3], c[4], 2 * c[5]])).max() < 1e-8


def _smooth_errors(n):
    g = Grid2D.unit_square(n)
    X, Y = g.meshgrid()
    f = np.sin(np.pi * X) * np.sin(np.pi * Y)
    d = gradient(ScalarField(g, f)).values
    h = hessian(ScalarField(g, f)).values
    dx = np.pi * np.cos(np.pi * X) * np.sin(np.pi * Y)
    dy = np.pi * np.sin(np.pi * X) * np.cos(np.pi * Y)
    hxx = -np.pi**2 * f
    hxy = np.pi**2 * np.cos(np.pi * X) * np.cos(np.pi * Y)
    eg = max(np.abs(d[..., 0] - dx).max(), np.abs(d[..., 1] - dy).max())
    eh = np.abs(h - np.stack([hxx, hxy, hxx], -1)).max()
    return eg, eh


def test_smooth_derivatives_are_second_order():
    e = [_smooth_errors(n + 1) for n in (32, 64, 128)]
    for k in range(2):
        orders = [np.log2(e[i][k] / e[i + 1][k]) for i in range(2)]
        assert min(orders) > 1.9
    # constants C = err / h^2 from a refinement run: gradient 10.33, Hessian 64.9
    for (eg, eh), n in zip(e, (32, 64, 128)):
        assert eg <= 10.4 / n**2 and eh <= 65.0 / n**2


def test_pack_unpack_roundtrip():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((4, 5, 2, 2))
    m = m + np.swapaxes(m, -1, -2)
    assert np.array_equal(unpack_sym(pack_sym(m)), m)


@given(arrays(float, 4, elements=finite))
def test_inverse_and_sqrt(a):
    S = spd_from(a)
    assert np.allclose(inv2(S) @ S, np.eye(2), atol=1e-9)
    R = sqrtm_spd(S)
    assert np.allclose(R @ R, S, atol=1e-10)
    assert np.allclose(R, R.T)
    assert det2(S) == pytest.approx(np.linalg.det(S), rel=1e-10)


def test_sqrt_rejects_indefinite():
    with pytest.raises(EllipticityError):
        sqrtm_spd(np.diag([1.0, -1.0]))


def test_require_elliptic():
    g = Grid2D.unit_square(4)
    with pytest.raises(EllipticityError):
        SymMatrixField.constant(g, 1.0, 0.0, -1.0).require_elliptic()
    lo, hi = SymMatrixField.constant(g, 2.0, 0.0, 3.0).require_elliptic()
    assert lo == pytest.approx(2.0) and hi == pytest.approx(3.0)


def test_decompose_identity_case():
    g = Grid2D.unit_square(4)
    g0 = SymMatrixField.constant(g, 2.0, 0.3, 1.0)
    d = decompose(g0, g0)
    assert np.allclose(d.trace_part.values, 2.0)
    assert np.abs(d.deviatoric_part.values).max() < 1e-15


def test_decompose_traceless_case():
    g = Grid2D.unit_square(4)
    gam = SymMatrixField.constant(g, 1.0, 0.0, -1.0)
    d = decompose(gam, SymMatrixField.identity(g))
    assert np.abs(d.trace_part.values).max() == 0.0
    assert np.array_equal(d.deviatoric_part.values, gam.values)


@given(arrays(float, 4, elements=finite), arrays(float, 3, elements=finite))
def test_decompose_recompose(a, s):
    g = Grid2D.unit_square(3)
    g0 = SymMatrixField.from_matrices(g, np.broadcast_to(spd_from(a), (3, 3, 2, 2)))
    gam = SymMatrixField(g, np.broadcast_to(s, (3, 3, 3)).copy())
    d = decompose(gam, g0)
    assert np.abs(d.recompose().values - gam.values).max() <= 1e-13 * max(1.0, np.abs(s).max() * 100)
    # the deviatoric part is traceless relative to gamma0
    assert np.abs(relative_trace(d.deviatoric_part.matrices(), g0.matrices())).max() < 1e-10


def test_tensor_divergence_of_variable_diagonal():
    g = Grid2D.unit_square(17)
    X, _ = g.meshgrid()
    gam = SymMatrixField(g, np.stack([1 + X**2 / 2, 0 * X, 1 + 0 * X], -1))
    d = tensor_divergence(gam).values
    assert np.abs(d[..., 0] - X).max() < 1e-12 and np.abs(d[..., 1]).max() < 1e-12


def test_norms_of_known_functions():
    g = Grid2D.unit_square(257)
    X, Y = g.meshgrid()
    one = np.ones(g.shape)
    assert l2_norm(one, g) == pytest.approx(1.0, abs=1e-14)
    f = np.sin(np.pi * X) * np.sin(np.pi * Y)
    exact = np.sqrt(0.25 + np.pi**2 / 2)
    assert h1_norm(f, g) == pytest.approx(exact, rel=1e-4)
