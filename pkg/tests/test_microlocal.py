import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st

from pdrkit import microlocal as ml
from pdrkit.microlocal import (LocalBackground, SymbolError, composition_residual, contract,
                               default_variable_gamma0, fit_decay_order, frame_xi, nullspace_angle,
                               nullspace_M0, parametrix_coeffs, random_background, random_spd, random_symmetric,
                               random_unit, residual_B_manipulation, residual_B_parametrix,
                               residual_change_of_basis, residual_Q_parametrix, residual_R_decomposition,
                               residual_trace_T, residual_xi_eta, sym, symbol_L, symbol_L_conjugated_closed,
                               symbol_M0, symbol_M0_direct, symbol_Mm1, symbol_Mm1_composition, symbol_q,
                               symbol_T, verify_identities)

seeds = st.integers(0, 2**32 - 1)
E1, E2 = np.eye(2)


def _sq1_point(x):
    """Background data of the identity scenario at ``x``."""
    grads = np.array([[1.0, 0.0], [0.0, 1.0], [x[0], -x[1]]])
    hess = np.array([np.zeros((2, 2)), np.zeros((2, 2)), np.diag([1.0, -1.0])])
    return LocalBackground(np.eye(2), np.zeros((2, 2, 2)), grads, hess, np.asarray(x))


def test_M0_hand_value():
    v = symbol_M0(np.eye(2), E1, E1, E1)
    assert np.allclose(v.value, -np.outer(E1, E1)) and v.degree == 0


@given(seeds, st.floats(0.1, 10.0))
def test_M0_homogeneous_degree_zero(seed, t):
    bg = random_background(np.random.default_rng(seed))
    xi = random_unit(np.random.default_rng(seed + 1))
    a = symbol_M0(bg.gamma0, bg.grads[0], bg.grads[2], xi).value
    b = symbol_M0(bg.gamma0, bg.grads[0], bg.grads[2], t * xi).value
    assert np.abs(a - b).max() <= 1e-12 * max(1.0, np.abs(a).max())


@given(seeds)
def test_M0_two_forms(seed):
    bg = random_background(np.random.default_rng(seed))
    xi = 3.0 * random_unit(np.random.default_rng(seed ^ 1))
    a = symbol_M0(bg.gamma0, bg.grads[0], bg.grads[1], xi).value
    assert np.abs(a - symbol_M0_direct(bg.gamma0, bg.grads[0], bg.grads[1], xi)).max() < 1e-12


@given(seeds)
def test_xi_eta_annihilated(seed):
    bg = random_background(np.random.default_rng(seed))
    xi = random_unit(np.random.default_rng(seed ^ 7)) * 2.0
    eta = np.array([-xi[1], xi[0]])
    assert residual_xi_eta(bg.gamma0, bg.grads, xi, eta) <= 1e-12


def test_nullspace_hand_case():
    ns = nullspace_M0(np.eye(2), np.eye(2), E1)
    assert ns.dimension == 1
    P = ns.basis[0]
    target = sym(E1, E2) / np.linalg.norm(sym(E1, E2))
    assert min(np.abs(P - target).max(), np.abs(P + target).max()) < 1e-12


@given(seeds)
def test_nullspace_dimension_and_angle(seed):
    bg = random_background(np.random.default_rng(seed))
    xi = random_unit(np.random.default_rng(seed ^ 3))
    ns = nullspace_M0(bg.gamma0, bg.grads[:2], xi)
    assert ns.dimension == 1
    assert nullspace_angle(ns, bg.gamma0, xi) <= 1e-8


def test_nullspace_rejects_dependent_gradients():
    with pytest.raises(SymbolError):
        nullspace_M0(np.eye(2), np.array([[1.0, 0.0], [2.0, 0.0]]), E1)


def test_zero_frequency_rejected():
    with pytest.raises(SymbolError):
        symbol_M0(np.eye(2), E1, E2, np.zeros(2))


def test_q_constant_identity():
    bg = LocalBackground(np.eye(2), np.zeros((2, 2, 2)), np.eye(2), np.zeros((2, 2, 2)))
    xi = np.array([3.0, 4.0])
    q2, q3 = symbol_q(bg, xi)
    assert q2.value == pytest.approx(1 / 25) and q3.value == 0
    assert q2.value * ml.symbol_l2(bg.gamma0, xi) == pytest.approx(1.0, abs=0)


def test_composition_vanishes_for_constant_background():
    g = lambda x: np.array([[2.0, 0.3], [0.3, 1.0]])  # noqa: E731
    dg = lambda x: np.zeros((2, 2, 2))  # noqa: E731
    d2g = lambda x: np.zeros((2, 2, 2, 2))  # noqa: E731
    assert abs(composition_residual(g, [0.3, 0.4], [7.0, -2.0], dg, d2g)) < 1e-14


def _symbolic_composition(x0, xi0):
    x, y, k1, k2 = sp.symbols("x y k1 k2", real=True)
    g = sp.Matrix([[1 + x**2 / 2, 0], [0, 1]])
    X, K = (x, y), sp.Matrix([k1, k2])
    l2 = (K.T * g * K)[0]
    div = [sum(sp.diff(g[i, j], X[i]) for i in range(2)) for j in range(2)]
    l1 = -sp.I * (div[0] * k1 + div[1] * k2)
    qq = l2
    t1 = qq * sum(sp.diff(g[i, j], X[i]) * K[j] for i in range(2) for j in range(2))
    t2 = 2 * sum(g[i, j] * K[j] * sp.diff(g[p, q], X[i]) * K[p] * K[q]
                 for i in range(2) for j in range(2) for p in range(2) for q in range(2))
    sQ = 1 / l2 + sp.I * (t1 - t2) / l2**3
    sL = l2 + l1
    res = sQ * sL + (sp.diff(sQ, k1) * sp.diff(sL, x) + sp.diff(sQ, k2) * sp.diff(sL, y)) / sp.I - 1
    return complex(res.subs({x: x0[0], y: x0[1], k1: xi0[0], k2: xi0[1]}).evalf(30))


def test_composition_matches_symbolic_oracle():
    g, dg, d2g = default_variable_gamma0()
    for x0, xi0 in (((0.3, 0.6), (10.0, 0.0)), ((0.8, 0.2), (6.0, -8.0)), ((0.5, 0.5), (-14.0, 14.0))):
        num = composition_residual(g, x0, xi0, dg, d2g)
        exact = _symbolic_composition(x0, xi0)
        assert abs(num - exact) <= 1e-9 * max(abs(exact), 1e-6)


def test_composition_decay_order():
    g, dg, d2g = default_variable_gamma0()
    rng = np.random.default_rng(11)
    for _ in range(10):
        x = rng.uniform(0, 1, 2)
        w = random_unit(rng)
        res = [composition_residual(g, x, t * w, dg, d2g) for t in ml.COMPOSITION_RADII]
        assert fit_decay_order(ml.COMPOSITION_RADII, res) >= 2.0


def test_composition_with_finite_difference_derivatives():
    g, dg, d2g = default_variable_gamma0()
    a = composition_residual(g, [0.4, 0.3], [12.0, 5.0], dg, d2g)
    b = composition_residual(g, [0.4, 0.3], [12.0, 5.0])
    assert abs(a - b) < 1e-6 * abs(a) + 1e-9


def test_Mm1_vanishes_for_linear_solutions():
    bg = LocalBackground(np.eye(2), np.zeros((2, 2, 2)), np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
                         np.zeros((3, 2, 2)))
    for i in range(3):
        for j in range(3):
            assert np.abs(symbol_Mm1(bg, i, j, [1.0, 2.0]).value).max() < 1e-15


@given(seeds)
def test_Mm1_two_routes(seed):
    rng = np.random.default_rng(seed)
    bg = random_background(rng)
    xi = random_unit(rng) * rng.uniform(0.5, 5)
    for i in range(3):
        for j in range(i, 3):
            a = symbol_Mm1(bg, i, j, xi).value
            b = symbol_Mm1_composition(bg, i, j, xi).value
            assert np.abs(a - b).max() <= 1e-11
            assert np.abs(a.real).max() == 0.0


@given(seeds, st.floats(0.2, 5.0))
def test_Mm1_degree_minus_one(seed, t):
    rng = np.random.default_rng(seed)
    bg = random_background(rng)
    xi = random_unit(rng)
    a = symbol_Mm1(bg, 0, 2, xi).value
    b = symbol_Mm1(bg, 0, 2, t * xi).value
    assert np.abs(b - a / t).max() <= 1e-12 * max(1.0, np.abs(a).max())


@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), seeds)
def test_sq1_L_order_zero_vanishes(x, y, seed):
    bg = _sq1_point([x, y])
    xi = random_unit(np.random.default_rng(seed)) * 4.0
    for i in range(2):
        assert np.abs(symbol_L(bg, i, xi, 0).value).max() <= 1e-12
        closed = symbol_L_conjugated_closed(bg, i, xi)
        assert np.abs(bg.A0 @ symbol_L(bg, i, xi, -1).value @ bg.A0 - closed).max() <= 1e-12


def test_symbol_L_order_check():
    with pytest.raises(ValueError):
        symbol_L(_sq1_point([0.5, 0.5]), 0, E1, -2)


def test_T_hand_values():
    assert np.allclose(symbol_T(np.eye(2), E1, 0, 0).value, np.outer(E1, E1))
    assert np.allclose(symbol_T(np.eye(2), E1, 0, 1).value, sym(E1, E2))


@given(seeds)
def test_T_trace_and_change_of_basis(seed):
    rng = np.random.default_rng(seed)
    g0 = random_spd(rng)
    xi = random_unit(rng)
    assert residual_trace_T(g0, xi, random_symmetric(rng)) <= 1e-13
    assert residual_change_of_basis(g0, xi) <= 1e-12
    fr = frame_xi(g0, xi)
    assert fr.orthonormality_defect() <= 1e-14


@given(seeds)
def test_parametrix_identities(seed):
    rng = np.random.default_rng(seed)
    bg = random_background(rng)
    xi = random_unit(rng) * rng.uniform(0.5, 5)
    assert residual_R_decomposition(bg.Mmat(), frame_xi(bg.gamma0, xi)) <= 1e-12
    assert residual_Q_parametrix(bg, xi) <= 1e-11
    assert residual_B_manipulation(bg, xi) <= 1e-11
    assert residual_B_parametrix(bg, xi) <= 1e-11


def test_Q00_carries_the_sign():
    # the stated (-1)^[ab=00] factor is absorbed into the coefficient of the (0, 0) pair
    rng = np.random.default_rng(5)
    bg = random_background(rng)
    xi = random_unit(rng)
    pc = parametrix_coeffs(bg, xi)
    M0 = [[symbol_M0(bg.gamma0, bg.grads[i], bg.grads[j], xi).value for j in range(2)] for i in range(2)]
    unsigned = -pc.Q[(0, 0)]
    lhs = sum(unsigned[i, j] * M0[i][j] for i in range(2) for j in range(2))
    assert np.abs(lhs + symbol_T(bg.gamma0, xi, 0, 0).value).max() < 1e-11


def test_contract_is_frobenius():
    A = np.array([[1.0, 2.0], [2.0, 3.0]])
    assert contract(A, np.eye(2)) == pytest.approx(4.0)


def test_verify_identities_all_pass():
    results = verify_identities(samples=200, seed=3, composition_samples=10)
    assert len(results) == 16
    failed = [r.line() for r in results if not r.passed]
    assert not failed, failed


def test_oscillation_study_decay():
    from pdrkit.cli import torus_oscillation_check
    study = torus_oscillation_check(cells=128, wavenumbers=(4, 8, 16))
    assert study.order0_decay >= 0.8
    # the order -1 correction improves agreement at every wavenumber
    assert np.all(study.residual_order1 < study.residual_order0)
    assert study.order1_decay > study.order0_decay
