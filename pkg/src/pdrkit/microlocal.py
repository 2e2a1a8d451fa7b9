"""Pointwise symbol calculus for the linearised power-density operators.

Everything here acts on data frozen at a single point ``x``: the background
tensor ``gamma0`` with its first spatial derivatives, and the gradients and
Hessians of the background solutions. Symbols are evaluated at a frequency
``xi`` and returned as :class:`SymbolSample` objects carrying their
homogeneity degree.

Notation (``n = 2``)::

    A0 = sqrt(gamma0),  xi0 = A0 xi,  e0 = xi0 / |xi0|,  e1 = rot90(e0)
    V_i = A0 grad u_i,  Hs_i = A0 hess(u_i) A0,  H_ij = V_i . V_j
    a (.) b = (a b^T + b a^T) / 2,  A : B = sum_ij A_ij B_ij

Complex symbols are numpy complex arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

NDIM = 2
_ROT90 = np.array([[0.0, -1.0], [1.0, 0.0]])
_SQRT2 = np.sqrt(2.0)


class SymbolError(ValueError):
    """Invalid input to a symbol evaluation (zero frequency, degenerate data)."""


# --------------------------------------------------------------------------
# small linear algebra
# --------------------------------------------------------------------------

def sym(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Symmetric product ``a (.) b``."""
    return 0.5 * (np.outer(a, b) + np.outer(b, a))


def contract(A: np.ndarray, B: np.ndarray):
    """Frobenius contraction ``A : B`` (no conjugation)."""
    return np.sum(A * B)


def spd_sqrt(m: np.ndarray) -> np.ndarray:
    lam, q = np.linalg.eigh(m)
    if lam[0] <= 0:
        raise SymbolError("gamma0 must be symmetric positive definite")
    return (q * np.sqrt(lam)) @ q.T


def sym_to_vec(P: np.ndarray) -> np.ndarray:
    """Orthonormal coordinates of a symmetric 2x2 matrix: ``(P11, sqrt2 P12, P22)``."""
    return np.array([P[0, 0], _SQRT2 * P[0, 1], P[1, 1]])


def vec_to_sym(v: np.ndarray) -> np.ndarray:
    return np.array([[v[0], v[1] / _SQRT2], [v[1] / _SQRT2, v[2]]])


def _check_xi(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (NDIM,) or not np.all(np.isfinite(xi)) or np.linalg.norm(xi) == 0.0:
        raise SymbolError("frequency xi must be a finite nonzero vector")
    return xi


# --------------------------------------------------------------------------
# data types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SymbolSample:
    """Value of a symbol at ``(x, xi)`` with its homogeneity degree in ``xi``."""

    x: np.ndarray | None
    xi: np.ndarray
    value: np.ndarray | complex
    degree: int

    @property
    def real(self):
        return np.real(self.value)

    @property
    def imag(self):
        return np.imag(self.value)


@dataclass(frozen=True)
class FrameXi:
    """Orthonormal frame ``(e0, e1)`` adapted to ``xi0 = A0 xi``."""

    xi0_norm: float
    vectors: np.ndarray        # rows e0, e1

    @property
    def e0(self) -> np.ndarray:
        return self.vectors[0]

    @property
    def e1(self) -> np.ndarray:
        return self.vectors[1]

    def orthonormality_defect(self) -> float:
        E = self.vectors
        return float(max(np.abs(E @ E.T - np.eye(NDIM)).max(),
                         np.abs(E.T @ E - np.eye(NDIM)).max()))


def frame_xi(gamma0: np.ndarray, xi) -> FrameXi:
    """``e0 = A0 xi / |A0 xi|`` and its rotation by a quarter turn."""
    xi = _check_xi(xi)
    xi0 = spd_sqrt(np.asarray(gamma0, dtype=float)) @ xi
    nrm = float(np.linalg.norm(xi0))
    e0 = xi0 / nrm
    return FrameXi(nrm, np.stack([e0, _ROT90 @ e0]))


@dataclass(frozen=True)
class LocalBackground:
    """Background data at one point: ``gamma0``, ``d_k gamma0``, and ``grad u_i``, ``hess u_i``.

    Parameters
    ----------
    gamma0 : (2, 2) SPD array
    dgamma0 : (2, 2, 2) array, ``dgamma0[k] = d gamma0 / d x_k``
    grads : (m, 2) array of solution gradients
    hessians : (m, 2, 2) array of solution Hessians
    x : optional point, kept for reporting
    """

    gamma0: np.ndarray
    dgamma0: np.ndarray
    grads: np.ndarray
    hessians: np.ndarray
    x: np.ndarray | None = None
    A0: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "A0", spd_sqrt(self.gamma0))

    @property
    def m(self) -> int:
        return self.grads.shape[0]

    @property
    def A0inv(self) -> np.ndarray:
        return np.linalg.inv(self.A0)

    def V(self, i: int) -> np.ndarray:
        return self.A0 @ self.grads[i]

    def Hs(self, i: int) -> np.ndarray:
        return self.A0 @ self.hessians[i] @ self.A0

    def power_density_matrix(self) -> np.ndarray:
        """``H_ij = V_i . V_j`` for ``i, j < n``."""
        V = np.stack([self.V(i) for i in range(NDIM)])
        return V @ V.T

    def mu_ratios(self) -> np.ndarray:
        """``r`` with ``sum_i r_i grad u_i + grad u_n = 0``."""
        if self.m < NDIM + 1:
            raise SymbolError("need n + 1 solutions")
        U = self.grads[:NDIM].T
        if abs(np.linalg.det(U)) < 1e-14 * max(np.abs(U).max() ** 2, 1e-300):
            raise SymbolError("gradients of u_1..u_n are linearly dependent")
        return np.linalg.solve(U, -self.grads[NDIM])

    def Mmat(self) -> np.ndarray:
        """``sum_i r_i Hs_i + Hs_n``."""
        r = self.mu_ratios()
        return sum(r[i] * self.Hs(i) for i in range(NDIM)) + self.Hs(NDIM)

    def div_gamma0(self) -> np.ndarray:
        """Row divergence ``(div gamma0)_j = sum_i d_i gamma0_ij``."""
        return np.einsum("iij->j", self.dgamma0)

    @classmethod
    def from_callables(cls, x, gamma0_fn: Callable, grad_fns, hess_fns,
                       dgamma0_fn: Callable | None = None, step: float = 1e-5) -> "LocalBackground":
        """Build from callables; ``d gamma0`` by central differences unless given."""
        x = np.asarray(x, dtype=float)
        g0 = np.asarray(gamma0_fn(x), dtype=float)
        dg = (np.asarray(dgamma0_fn(x), dtype=float) if dgamma0_fn is not None
              else tensor_gradient_fd(gamma0_fn, x, step))
        grads = np.stack([np.asarray(f(x), dtype=float) for f in grad_fns])
        hess = np.stack([np.asarray(f(x), dtype=float) for f in hess_fns])
        return cls(g0, dg, grads, hess, x)


def tensor_gradient_fd(fn: Callable, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference ``d fn / d x_k`` stacked on the leading axis."""
    x = np.asarray(x, dtype=float)
    out = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        out.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * step))
    return np.stack(out)


# --------------------------------------------------------------------------
# order-zero symbols
# --------------------------------------------------------------------------

def _M0_conjugated(Vi, Vj, e0) -> np.ndarray:
    return sym(Vi, Vj) - (e0 @ Vi) * sym(e0, Vj) - (e0 @ Vj) * sym(e0, Vi)


def symbol_M0(gamma0, grad_i, grad_j, xi, x=None) -> SymbolSample:
    """Principal symbol of ``dH_ij``:
    ``A0^-1 (V_i (.) V_j - (e0.V_i) e0 (.) V_j - (e0.V_j) e0 (.) V_i) A0^-1``."""
    xi = _check_xi(xi)
    gamma0 = np.asarray(gamma0, dtype=float)
    A0 = spd_sqrt(gamma0)
    A0i = np.linalg.inv(A0)
    e0 = frame_xi(gamma0, xi).e0
    val = A0i @ _M0_conjugated(A0 @ grad_i, A0 @ grad_j, e0) @ A0i
    return SymbolSample(x, xi, val, 0)


def symbol_M0_direct(gamma0, grad_i, grad_j, xi) -> np.ndarray:
    """Same symbol written without ``A0``:
    ``grad u_i (.) grad u_j - ((gamma0 grad u_i . xi) xi (.) grad u_j + (i<->j)) / (xi . gamma0 xi)``."""
    xi = _check_xi(xi)
    g = np.asarray(gamma0, dtype=float)
    l2 = xi @ g @ xi
    return (sym(grad_i, grad_j)
            - ((g @ grad_i) @ xi * sym(xi, grad_j) + (g @ grad_j) @ xi * sym(xi, grad_i)) / l2)


@dataclass(frozen=True)
class Nullspace:
    basis: np.ndarray              # (k, 2, 2) symmetric null matrices, orthonormal in S_2
    singular_values: np.ndarray

    @property
    def dimension(self) -> int:
        return self.basis.shape[0]


def nullspace_M0(gamma0, grads, xi, rtol: float = 1e-9) -> Nullspace:
    """Common kernel of ``P -> M_ij|0 : P`` over ``i <= j < n``."""
    grads = np.asarray(grads, dtype=float)[:NDIM]
    if abs(np.linalg.det(grads)) < 1e-12 * max(np.abs(grads).max() ** 2, 1e-300):
        raise SymbolError("nullspace requires linearly independent gradients")
    rows = []
    for i in range(NDIM):
        for j in range(i, NDIM):
            M = symbol_M0(gamma0, grads[i], grads[j], xi).value
            # M : P = <coords of M, coords of P> in the orthonormal basis
            rows.append(sym_to_vec(M))
    _, s, vt = np.linalg.svd(np.array(rows))    # square: n(n+1)/2 pairs x n(n+1)/2 coordinates
    null = vt[s <= rtol * s[0]]
    return Nullspace(np.array([vec_to_sym(v) for v in null]).reshape(-1, NDIM, NDIM), s)


def xi_eta_space(gamma0, xi) -> np.ndarray:
    """Basis of ``gamma0 xi (.) {xi}^perp`` as orthonormal S_2 coordinate rows."""
    xi = _check_xi(xi)
    eta = _ROT90 @ xi
    v = sym_to_vec(sym(np.asarray(gamma0) @ xi, eta))
    return (v / np.linalg.norm(v))[None, :]


def nullspace_angle(ns: Nullspace, gamma0, xi) -> float:
    """Largest principal angle between the computed kernel and ``gamma0 xi (.) {xi}^perp``."""
    A = np.array([sym_to_vec(P) for P in ns.basis]).T
    B = xi_eta_space(gamma0, xi).T
    return float(np.max(scipy.linalg.subspace_angles(A, B)))


# --------------------------------------------------------------------------
# parametrix of L0 and composition
# --------------------------------------------------------------------------

def symbol_l2(gamma0, xi) -> float:
    return float(xi @ gamma0 @ xi)


def symbol_q(bg: LocalBackground, xi) -> tuple[SymbolSample, SymbolSample]:
    """``q_-2 = 1 / l2`` and
    ``q_-3 = i l2^-3 xi_p xi_q xi_j (g_pq d_i g_ij - 2 g_ij d_i g_pq)``."""
    xi = _check_xi(xi)
    g, dg = bg.gamma0, bg.dgamma0
    l2 = symbol_l2(g, xi)
    qq = xi @ g @ xi                                    # g_pq xi_p xi_q
    t1 = qq * np.einsum("iij,j->", dg, xi)              # d_i g_ij xi_j
    t2 = 2.0 * np.einsum("ij,j,ipq,p,q->", g, xi, dg, xi, xi)
    q3 = 1j * (t1 - t2) / l2**3
    return SymbolSample(bg.x, xi, 1.0 / l2, -2), SymbolSample(bg.x, xi, q3, -3)


def grad_x_q2(bg: LocalBackground, xi) -> np.ndarray:
    """``grad_x q_-2 = -l2^-2 (xi . d_k gamma0 xi)_k``."""
    l2 = symbol_l2(bg.gamma0, xi)
    return -np.einsum("kpq,p,q->k", bg.dgamma0, xi, xi) / l2**2


def G_vector(bg: LocalBackground, xi) -> np.ndarray:
    """``|xi0|^2 (i q_-3 xi0 + A0 grad_x q_-2)`` (real, degree 0)."""
    xi = _check_xi(xi)
    _, q3 = symbol_q(bg, xi)
    xi0 = bg.A0 @ xi
    G = (xi0 @ xi0) * (1j * q3.value * xi0 + bg.A0 @ grad_x_q2(bg, xi))
    return np.real_if_close(G, tol=1e6)


def composition_residual(gamma0_fn: Callable, x, xi, dgamma0_fn: Callable | None = None,
                         d2gamma0_fn: Callable | None = None, step: float = 1e-5) -> complex:
    """``sigma_Q sigma_L + (1/i) grad_xi sigma_Q . grad_x sigma_L - 1`` for
    ``sigma_Q = q_-2 + q_-3`` and ``sigma_L = l2 + l1``, ``l1 = -i (div gamma0) . xi``.

    Spatial derivatives come from the callables when given, else from
    central differences; the frequency gradient is taken by central
    differences with a step relative to ``|xi|``.
    """
    x = np.asarray(x, dtype=float)
    xi = _check_xi(xi)
    dfn = dgamma0_fn or (lambda y: tensor_gradient_fd(gamma0_fn, y, step))
    d2fn = d2gamma0_fn or (lambda y: tensor_gradient_fd(dfn, y, 10 * step))

    def bg_at(y):
        return LocalBackground(np.asarray(gamma0_fn(y), float), np.asarray(dfn(y), float),
                               np.zeros((1, NDIM)), np.zeros((1, NDIM, NDIM)), y)

    bg = bg_at(x)

    def sigma_Q(z):
        q2, q3 = symbol_q(bg, z)
        return q2.value + q3.value

    g, dg = bg.gamma0, bg.dgamma0
    d2g = np.asarray(d2fn(x), dtype=float)             # d2g[l, k] = d_l d_k gamma0
    l2 = xi @ g @ xi
    l1 = -1j * (bg.div_gamma0() @ xi)
    grad_x_l2 = np.einsum("kpq,p,q->k", dg, xi, xi)
    grad_x_l1 = -1j * np.einsum("liij,j->l", d2g, xi)
    h = 1e-6 * np.linalg.norm(xi)
    grad_xi_Q = np.array([(sigma_Q(xi + h * e) - sigma_Q(xi - h * e)) / (2 * h) for e in np.eye(NDIM)])
    val = sigma_Q(xi) * (l2 + l1) + (grad_xi_Q @ (grad_x_l2 + grad_x_l1)) / 1j - 1.0
    return complex(val)


def fit_decay_order(radii, residuals) -> float:
    """Least-squares slope of ``-log|residual|`` against ``log radius``."""
    slope = np.polyfit(np.log(np.asarray(radii, float)), np.log(np.abs(np.asarray(residuals))), 1)[0]
    return float(-slope)


# --------------------------------------------------------------------------
# order -1 symbols
# --------------------------------------------------------------------------

def _half_Mm1_conjugated(bg: LocalBackground, i: int, j: int, xi) -> np.ndarray:
    """``A0 sigma(R_i Q P_j)|_-1 A0`` in closed form."""
    fr = frame_xi(bg.gamma0, xi)
    e0, nrm = fr.e0, fr.xi0_norm
    Vi, Vj, Hj = bg.V(i), bg.V(j), bg.Hs(j)
    G = G_vector(bg, xi)
    return 1j / nrm * ((e0 @ Vi) * (Hj - 2 * sym(e0, Hj @ e0)) + sym(e0, Hj @ Vi)
                       + (Vi @ G) * sym(e0, Vj))


def symbol_Mm1(bg: LocalBackground, i: int, j: int, xi) -> SymbolSample:
    """Degree -1 term of the symbol of ``dH_ij`` (purely imaginary, symmetric)."""
    xi = _check_xi(xi)
    Ai = bg.A0inv
    C = _half_Mm1_conjugated(bg, i, j, xi) + _half_Mm1_conjugated(bg, j, i, xi)
    return SymbolSample(bg.x, xi, Ai @ C @ Ai, -1)


def symbol_Mm1_composition(bg: LocalBackground, i: int, j: int, xi) -> SymbolSample:
    """Independent route to the same symbol, straight from the composition rule.

    With ``r_i = i gamma0 grad u_i . xi``, ``p_j = i xi (.) grad u_j + hess u_j``::

        sigma(R_i Q P_j)|_-1 = r_i (q_-3 p_j1 + q_-2 p_j0)
                               + (1/i) (p_j1 grad_xi r_i . grad_x q_-2
                                        + grad_xi(q_-2 r_i) . grad_x p_j1)

    ``grad_x p_j1`` uses ``d_k grad u_j = hess(u_j) e_k``.
    """
    xi = _check_xi(xi)
    g = bg.gamma0
    q2s, q3s = symbol_q(bg, xi)
    q2, q3 = q2s.value, q3s.value
    dq2 = grad_x_q2(bg, xi)
    l2 = symbol_l2(g, xi)

    def half(a, b):
        ga, gb, hb = bg.grads[a], bg.grads[b], bg.hessians[b]
        r = 1j * (g @ ga) @ xi
        dxi_r = 1j * g @ ga
        p1 = 1j * sym(xi, gb)
        dxi_qr = q2 * dxi_r + r * (-2.0 * (g @ xi) / l2**2)
        dx_p1 = [1j * sym(xi, hb[:, k]) for k in range(NDIM)]
        s = r * (q3 * p1 + q2 * hb)
        s = s + (p1 * (dxi_r @ dq2) + sum(dxi_qr[k] * dx_p1[k] for k in range(NDIM))) / 1j
        return s

    return SymbolSample(bg.x, xi, half(i, j) + half(j, i), -1)


def symbol_L(bg: LocalBackground, i: int, xi, order: int) -> SymbolSample:
    """``sigma_{L_i}|_k = sum_j r_j M_ij|_k + M_{i,n}|_k`` for ``k`` in ``{0, -1}``."""
    r = bg.mu_ratios()
    if order == 0:
        f = lambda a, b: symbol_M0(bg.gamma0, bg.grads[a], bg.grads[b], xi).value  # noqa: E731
    elif order == -1:
        f = lambda a, b: symbol_Mm1(bg, a, b, xi).value  # noqa: E731
    else:
        raise ValueError("order must be 0 or -1")
    val = sum(r[j] * f(i, j) for j in range(NDIM)) + f(i, NDIM)
    return SymbolSample(bg.x, _check_xi(xi), val, order)


def symbol_L_conjugated_closed(bg: LocalBackground, i: int, xi) -> np.ndarray:
    """``A0 sigma_{L_i}|_-1 A0 = i |xi0|^-1 ((e0.V_i)(M - 2 e0 (.) M e0) + e0 (.) M V_i)``."""
    fr = frame_xi(bg.gamma0, xi)
    e0 = fr.e0
    M = bg.Mmat()
    Vi = bg.V(i)
    return 1j / fr.xi0_norm * ((e0 @ Vi) * (M - 2 * sym(e0, M @ e0)) + sym(e0, M @ Vi))


# --------------------------------------------------------------------------
# frame symbols and parametrix coefficients
# --------------------------------------------------------------------------

def symbol_T(gamma0, xi, p: int, q: int) -> SymbolSample:
    """``A0^-1 e_p (.) e_q A0^-1`` for the frame ``(e0, e1)``."""
    gamma0 = np.asarray(gamma0, dtype=float)
    fr = frame_xi(gamma0, xi)
    Ai = np.linalg.inv(spd_sqrt(gamma0))
    return SymbolSample(None, np.asarray(xi, float), Ai @ sym(fr.vectors[p], fr.vectors[q]) @ Ai, 0)


@dataclass(frozen=True)
class ParametrixCoefficients:
    """Principal symbols of the post-processing operators.

    ``Q[(a, b)][i, j]`` (frame indices ``a <= b``, with ``(0, 0)`` and pairs of
    indices ``>= 1``), ``B[a - 1, i]`` for ``a >= 1``, the matrix ``R``, and the
    scalars ``R_a[a - 1]`` and ``R_ab[a, b]`` (frame indices, including 0).
    """

    Q: dict
    B: np.ndarray
    R: np.ndarray
    R_a: np.ndarray
    R_ab: np.ndarray
    half_order_L0: complex


def parametrix_coeffs(bg: LocalBackground, xi) -> ParametrixCoefficients:
    fr = frame_xi(bg.gamma0, xi)
    E = fr.vectors
    V = np.stack([bg.V(i) for i in range(NDIM)])
    H = V @ V.T
    if abs(np.linalg.det(H)) < 1e-14 * max(np.abs(H).max() ** 2, 1e-300):
        raise SymbolError("power-density matrix H is singular")
    Hi = np.linalg.inv(H)
    M = bg.Mmat()
    if abs(np.linalg.det(M)) < 1e-14 * max(np.abs(M).max() ** 2, 1e-300):
        raise SymbolError("the matrix M is singular")
    Mi = np.linalg.inv(M)
    proj = E @ V.T                               # proj[a, q] = e_a . V_q
    c = proj @ Hi                                # c[a, j] = H^{qj} (e_a . V_q)
    Q = {}
    for a in range(NDIM):
        for b in range(a, NDIM):
            if (a == 0) != (b == 0):
                continue
            sign = -1.0 if a == b == 0 else 1.0
            # Q_ab ij = H^{qj}(e_a.V_q) H^{pi}(e_b.V_p)
            Q[(a, b)] = sign * np.outer(c[b], c[a])
    B = (E[1:] @ Mi @ V.T) @ Hi                  # B[a, i] = H^{pi} (e_a . M^-1 V_p)
    R = M - 2 * sym(E[0], M @ E[0])
    R_a = E[0] @ Mi @ E[1:].T
    R_ab = E @ M @ E.T
    return ParametrixCoefficients(Q, B, R, np.atleast_1d(R_a), R_ab, -1j * fr.xi0_norm)


# --------------------------------------------------------------------------
# identities as residual functions
# --------------------------------------------------------------------------

def residual_xi_eta(gamma0, grads, xi, eta) -> float:
    """``max_ij |M_ij|0 : (gamma0 xi (.) eta)|`` for ``eta`` orthogonal to ``xi``."""
    P = sym(np.asarray(gamma0) @ xi, eta)
    m = len(grads)
    return max(abs(contract(symbol_M0(gamma0, grads[i], grads[j], xi).value, P))
               for i in range(m) for j in range(i, m))


def residual_R_decomposition(M: np.ndarray, fr: FrameXi) -> float:
    """``M - 2 e0 (.) M e0 = -(e0.M e0) e0 (.) e0 + sum_ab (e_a.M e_b) e_a (.) e_b`` (a, b >= 1)."""
    E = fr.vectors
    lhs = M - 2 * sym(E[0], M @ E[0])
    rhs = -(E[0] @ M @ E[0]) * sym(E[0], E[0])
    for a in range(1, NDIM):
        for b in range(1, NDIM):
            rhs = rhs + (E[a] @ M @ E[b]) * sym(E[a], E[b])
    return float(np.abs(lhs - rhs).max())


def residual_Q_parametrix(bg: LocalBackground, xi) -> float:
    """``sum_ij sigma_Q_ab,ij M_ij|0 = T_ab`` for the admissible frame pairs."""
    pc = parametrix_coeffs(bg, xi)
    M0 = [[symbol_M0(bg.gamma0, bg.grads[i], bg.grads[j], xi).value for j in range(NDIM)]
          for i in range(NDIM)]
    worst = 0.0
    for (a, b), coeff in pc.Q.items():
        lhs = sum(coeff[i, j] * M0[i][j] for i in range(NDIM) for j in range(NDIM))
        worst = max(worst, float(np.abs(lhs - symbol_T(bg.gamma0, xi, a, b).value).max()))
    return worst


def residual_B_manipulation(bg: LocalBackground, xi) -> float:
    """``sum_i sigma_B_ai A0 sigma_{L_i}|-1 A0 = i|xi0|^-1 ((e0.M^-1 e_a) R + e0 (.) e_a)``."""
    pc = parametrix_coeffs(bg, xi)
    fr = frame_xi(bg.gamma0, xi)
    A0 = bg.A0
    worst = 0.0
    for a in range(1, NDIM):
        lhs = sum(pc.B[a - 1, i] * (A0 @ symbol_L(bg, i, xi, -1).value @ A0) for i in range(NDIM))
        rhs = 1j / fr.xi0_norm * (pc.R_a[a - 1] * pc.R + sym(fr.e0, fr.vectors[a]))
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst


def residual_B_parametrix(bg: LocalBackground, xi) -> float:
    """``sigma_{L0^1/2} sum_i sigma_B_ai sigma_{L_i}|-1 - R_a A0^-1 R A0^-1 = T_0a``, with
    ``A0^-1 R A0^-1 = -R_00 T_00 + sum_bc R_bc T_bc``."""
    pc = parametrix_coeffs(bg, xi)
    Ai = bg.A0inv
    T = lambda p, q: symbol_T(bg.gamma0, xi, p, q).value  # noqa: E731
    R_from_T = -pc.R_ab[0, 0] * T(0, 0) + sum(pc.R_ab[b, c] * T(b, c)
                                               for b in range(1, NDIM) for c in range(1, NDIM))
    worst = float(np.abs(Ai @ pc.R @ Ai - R_from_T).max())
    for a in range(1, NDIM):
        lhs = pc.half_order_L0 * sum(pc.B[a - 1, i] * symbol_L(bg, i, xi, -1).value for i in range(NDIM))
        lhs = lhs - pc.R_a[a - 1] * (Ai @ pc.R @ Ai)
        worst = max(worst, float(np.abs(lhs - T(0, a)).max()))
    return worst


def residual_trace_T(gamma0, xi, gamma) -> float:
    """``sum_p T_pp : gamma = tr(gamma0^-1 gamma)``."""
    lhs = sum(contract(symbol_T(gamma0, xi, p, p).value, gamma) for p in range(NDIM))
    return abs(lhs - np.trace(np.linalg.solve(gamma0, gamma)))


def residual_change_of_basis(gamma0, xi) -> float:
    """``sum_pq (e_i.A0 e_p)(e_j.A0 e_q) T_pq = e_i (.) e_j`` for all ``i, j``."""
    fr = frame_xi(gamma0, xi)
    AE = spd_sqrt(np.asarray(gamma0, float)) @ fr.vectors.T      # column p: A0 e_p
    I = np.eye(NDIM)
    worst = 0.0
    for i in range(NDIM):
        for j in range(NDIM):
            lhs = sum(AE[i, p] * AE[j, q] * symbol_T(gamma0, xi, p, q).value
                      for p in range(NDIM) for q in range(NDIM))
            worst = max(worst, float(np.abs(lhs - sym(I[i], I[j])).max()))
    return worst


# --------------------------------------------------------------------------
# random sampling
# --------------------------------------------------------------------------

def random_spd(rng: np.random.Generator) -> np.ndarray:
    """``A^T A + 0.1 I`` with ``A`` uniform in ``[-1, 1]``."""
    A = rng.uniform(-1.0, 1.0, (NDIM, NDIM))
    return A.T @ A + 0.1 * np.eye(NDIM)


def random_symmetric(rng: np.random.Generator) -> np.ndarray:
    A = rng.uniform(-1.0, 1.0, (NDIM, NDIM))
    return 0.5 * (A + A.T)


def random_unit(rng: np.random.Generator) -> np.ndarray:
    t = rng.uniform(0.0, 2 * np.pi)
    return np.array([np.cos(t), np.sin(t)])


def random_background(rng: np.random.Generator, m: int = NDIM + 1, min_det: float = 0.1,
                      max_cond: float = 1e3) -> LocalBackground:
    """Random point data with ``|det grad U| >= min_det`` and ``cond(M) <= max_cond``."""
    while True:
        g0 = random_spd(rng)
        dg = np.stack([random_symmetric(rng) for _ in range(NDIM)])
        grads = rng.uniform(-1.0, 1.0, (m, NDIM))
        hess = np.stack([random_symmetric(rng) for _ in range(m)])
        if abs(np.linalg.det(grads[:NDIM])) < min_det:
            continue
        bg = LocalBackground(g0, dg, grads, hess)
        if m > NDIM and np.linalg.cond(bg.Mmat()) > max_cond:
            continue
        if np.linalg.cond(bg.power_density_matrix()) > max_cond:
            continue
        return bg


# --------------------------------------------------------------------------
# identity report
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class IdentityResult:
    name: str
    samples: int
    max_residual: float
    threshold: float
    comparison: str = "<="

    @property
    def passed(self) -> bool:
        if self.comparison == "<=":
            return bool(self.max_residual <= self.threshold)
        return bool(self.max_residual >= self.threshold)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<34} samples = {self.samples:<6d} value = {self.max_residual:.3e}  "
                f"threshold {self.comparison} {self.threshold:.1e}  [{status}]")


COMPOSITION_RADII = (10.0, 20.0, 40.0)


def default_variable_gamma0():
    """``diag(1 + x^2/2, 1)`` and its exact first and second derivatives."""

    def g(x):
        return np.array([[1.0 + 0.5 * x[0] ** 2, 0.0], [0.0, 1.0]])

    def dg(x):
        out = np.zeros((NDIM, NDIM, NDIM))
        out[0, 0, 0] = x[0]
        return out

    def d2g(x):
        out = np.zeros((NDIM, NDIM, NDIM, NDIM))
        out[0, 0, 0, 0] = 1.0
        return out

    return g, dg, d2g


def composition_orders(rng: np.random.Generator, samples: int, gamma0=None,
                       radii=COMPOSITION_RADII) -> np.ndarray:
    """Fitted decay orders of the composition residual at random points and directions."""
    g, dg, d2g = gamma0 if gamma0 is not None else default_variable_gamma0()
    orders = np.empty(samples)
    for k in range(samples):
        x = rng.uniform(0.0, 1.0, NDIM)
        w = random_unit(rng)
        res = [composition_residual(g, x, t * w, dg, d2g) for t in radii]
        orders[k] = fit_decay_order(radii, res)
    return orders


def verify_identities(samples: int = 1000, seed: int = 20240, composition_samples: int = 50,
                      tol: float = 1e-11) -> list[IdentityResult]:
    """Randomised check of every pointwise identity; one result per identity."""
    rng = np.random.default_rng(seed)
    acc = {k: 0.0 for k in ("xi_eta", "null_angle", "R_decomp", "Q_param", "B_manip", "B_param",
                            "trace_T", "basis", "L0", "L_closed", "Mm1_routes", "homog",
                            "frame", "M0_forms")}
    dims = set()
    for _ in range(samples):
        bg = random_background(rng)
        xi = random_unit(rng) * rng.uniform(0.5, 5.0)
        eta = _ROT90 @ xi / np.linalg.norm(xi)
        g0 = bg.gamma0
        fr = frame_xi(g0, xi)
        acc["xi_eta"] = max(acc["xi_eta"], residual_xi_eta(g0, bg.grads[:NDIM], xi, eta))
        ns = nullspace_M0(g0, bg.grads[:NDIM], xi)
        dims.add(ns.dimension)
        if ns.dimension == NDIM - 1:
            acc["null_angle"] = max(acc["null_angle"], nullspace_angle(ns, g0, xi))
        acc["R_decomp"] = max(acc["R_decomp"], residual_R_decomposition(bg.Mmat(), fr))
        acc["Q_param"] = max(acc["Q_param"], residual_Q_parametrix(bg, xi))
        acc["B_manip"] = max(acc["B_manip"], residual_B_manipulation(bg, xi))
        acc["B_param"] = max(acc["B_param"], residual_B_parametrix(bg, xi))
        acc["trace_T"] = max(acc["trace_T"], residual_trace_T(g0, xi, random_symmetric(rng)))
        acc["basis"] = max(acc["basis"], residual_change_of_basis(g0, xi))
        for i in range(NDIM):
            acc["L0"] = max(acc["L0"], float(np.abs(symbol_L(bg, i, xi, 0).value).max()))
            lhs = bg.A0 @ symbol_L(bg, i, xi, -1).value @ bg.A0
            acc["L_closed"] = max(acc["L_closed"],
                                  float(np.abs(lhs - symbol_L_conjugated_closed(bg, i, xi)).max()))
        for i in range(bg.m):
            for j in range(i, bg.m):
                a = symbol_Mm1(bg, i, j, xi).value
                b = symbol_Mm1_composition(bg, i, j, xi).value
                acc["Mm1_routes"] = max(acc["Mm1_routes"], float(np.abs(a - b).max()))
        t = rng.uniform(0.5, 4.0)
        h = 0.0
        for fn, deg in ((lambda z: symbol_M0(g0, bg.grads[0], bg.grads[2], z).value, 0),
                        (lambda z: symbol_Mm1(bg, 0, 2, z).value, -1),
                        (lambda z: symbol_q(bg, z)[0].value, -2),
                        (lambda z: symbol_q(bg, z)[1].value, -3)):
            v1, v2 = fn(xi), fn(t * xi)
            h = max(h, float(np.abs(v2 - t**deg * v1).max() / max(np.abs(v1).max(), 1e-300)))
        acc["homog"] = max(acc["homog"], h)
        frame_def = max(fr.orthonormality_defect(),
                        float(np.abs(sum(np.outer(e, e) for e in fr.vectors) - np.eye(NDIM)).max()))
        acc["frame"] = max(acc["frame"], frame_def)
        acc["M0_forms"] = max(acc["M0_forms"], float(np.abs(
            symbol_M0(g0, bg.grads[0], bg.grads[1], xi).value
            - symbol_M0_direct(g0, bg.grads[0], bg.grads[1], xi)).max()))

    orders = composition_orders(rng, composition_samples)
    dim_ok = float(len(dims) == 1 and NDIM - 1 in dims)
    return [
        IdentityResult("xi-eta orthogonality", samples, acc["xi_eta"], 1e-12),
        IdentityResult("nullspace dimension = n-1", samples, dim_ok, 1.0, ">="),
        IdentityResult("nullspace angle", samples, acc["null_angle"], 1e-8),
        IdentityResult("R decomposition in frame", samples, acc["R_decomp"], 1e-12),
        IdentityResult("Q parametrix (order 0)", samples, acc["Q_param"], tol),
        IdentityResult("B coefficients on L_i", samples, acc["B_manip"], tol),
        IdentityResult("B parametrix with remainder", samples, acc["B_param"], tol),
        IdentityResult("trace of T_pp", samples, acc["trace_T"], 1e-13),
        IdentityResult("change of basis", samples, acc["basis"], 1e-12),
        IdentityResult("sigma_L order 0 vanishes", samples, acc["L0"], tol),
        IdentityResult("sigma_L order -1 closed form", samples, acc["L_closed"], tol),
        IdentityResult("M|-1 two routes agree", samples, acc["Mm1_routes"], tol),
        IdentityResult("homogeneity degrees", samples, acc["homog"], 1e-12),
        IdentityResult("frame orthonormality", samples, acc["frame"], 1e-14),
        IdentityResult("M|0 two forms agree", samples, acc["M0_forms"], 1e-12),
        IdentityResult("composition decay order", composition_samples, float(orders.min()), 2.0, ">="),
    ]


# --------------------------------------------------------------------------
# symbols applied as periodic multipliers (constant background tensor)
# --------------------------------------------------------------------------

def _vsym(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 0.5 * (a[..., :, None] * b[..., None, :] + b[..., :, None] * a[..., None, :])


def _vdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...k,...k->...", a, b)


_SYM_BASIS = (np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[0.0, 1.0], [1.0, 0.0]]),
              np.array([[0.0, 0.0], [0.0, 1.0]]))


def apply_symbols_periodic(gamma0: np.ndarray, grads: np.ndarray, hessians: np.ndarray,
                           gamma: np.ndarray, grid, pairs, orders=(0,)) -> dict:
    """Quantise ``sum_k M_ij|_k`` on the period cell for a constant ``gamma0``.

    ``grads`` is ``(ny, nx, 2, m)``, ``hessians`` packed ``(ny, nx, 3, m)``
    and ``gamma`` full matrices ``(ny, nx, 2, 2)`` on the closed grid; the
    last row and column are treated as periodic copies. The symbols are
    bilinear in ``(V_i, V_j)`` or ``(V_i, Hs_j)``, so each is expanded over
    coordinate directions: a sum of ``x``-dependent coefficients times
    ``xi``-only Fourier multipliers.
    """
    from .measure import _wrap, periodic_wavenumbers

    g0 = np.asarray(gamma0, dtype=float)
    A0 = spd_sqrt(g0)
    A0i = np.linalg.inv(A0)
    cell = (slice(0, grid.ny - 1), slice(0, grid.nx - 1))
    gu, hu = grads[cell], hessians[cell]
    g_hat = np.fft.fft2(gamma[cell], axes=(0, 1))
    xi = periodic_wavenumbers(grid)
    xi0 = xi @ A0.T
    nrm = np.linalg.norm(xi0, axis=-1)
    zero = nrm == 0
    nrm_safe = np.where(zero, 1.0, nrm)
    e0 = xi0 / nrm_safe[..., None]
    I2 = np.eye(NDIM)

    def apply(mult):
        mult = A0i @ mult @ A0i
        mult[zero] = 0.0
        return np.real(np.fft.ifft2(np.einsum("...ab,...ab->...", mult, g_hat), axes=(0, 1)))

    def m0(Va, Vb):
        Va, Vb = np.broadcast_to(Va, e0.shape), np.broadcast_to(Vb, e0.shape)
        return (_vsym(Va, Vb) - _vdot(e0, Va)[..., None, None] * _vsym(e0, Vb)
                - _vdot(e0, Vb)[..., None, None] * _vsym(e0, Va))

    def m1_half(Va, Hm):
        Va = np.broadcast_to(Va, e0.shape)
        He = e0 @ Hm.T
        Ha = np.einsum("ab,...b->...a", Hm, Va)
        val = _vdot(e0, Va)[..., None, None] * (Hm - 2 * _vsym(e0, He)) + _vsym(e0, Ha)
        return 1j / nrm_safe[..., None, None] * val

    # multipliers are shared by all pairs
    M0 = {(a, b): apply(m0(A0 @ I2[a], A0 @ I2[b])) for a in range(NDIM) for b in range(NDIM)}
    M1 = {}
    if -1 in orders:
        M1 = {(a, s): apply(m1_half(A0 @ I2[a], A0 @ _SYM_BASIS[s] @ A0))
              for a in range(NDIM) for s in range(3)}
    out = {}
    for i, j in pairs:
        val = np.zeros(gu.shape[:2])
        if 0 in orders:
            for a in range(NDIM):
                for b in range(NDIM):
                    val += gu[..., a, i] * gu[..., b, j] * M0[(a, b)]
        if -1 in orders:
            for a in range(NDIM):
                for s in range(3):
                    val += gu[..., a, i] * hu[..., s, j] * M1[(a, s)]
                    val += gu[..., a, j] * hu[..., s, i] * M1[(a, s)]
        out[(i, j)] = _wrap(val)
    return out


@dataclass(frozen=True)
class OscillationStudy:
    wavenumbers: np.ndarray
    residual_order0: np.ndarray
    residual_order1: np.ndarray

    @property
    def order0_decay(self) -> float:
        return fit_decay_order(self.wavenumbers, self.residual_order0)

    @property
    def order1_decay(self) -> float:
        return fit_decay_order(self.wavenumbers, self.residual_order1)


def oscillation_study(gamma0: np.ndarray, grads: np.ndarray, hessians: np.ndarray, base_gamma,
                      wavenumbers, pairs) -> OscillationStudy:
    """Relative residual between the torus PDE route and the quantised symbols.

    ``base_gamma`` is a SymMatrixField vanishing on the boundary; the test
    fields are ``base_gamma * cos(2 pi k x)``.
    """
    from .fields import SymMatrixField
    from .measure import periodic_linearized_power_densities

    grid = base_gamma.grid
    X, _ = grid.meshgrid()
    cell = (slice(0, grid.ny - 1), slice(0, grid.nx - 1))
    r0, r1 = [], []
    for k in wavenumbers:
        gk = SymMatrixField(grid, base_gamma.values * np.cos(2 * np.pi * k * (X - grid.x0) / grid.Lx)[..., None])
        ref = periodic_linearized_power_densities(gamma0, grads, gk, pairs)
        sym0 = apply_symbols_periodic(gamma0, grads, hessians, gk.matrices(), grid, pairs, (0,))
        sym1 = apply_symbols_periodic(gamma0, grads, hessians, gk.matrices(), grid, pairs, (0, -1))
        den = np.sqrt(sum(np.sum(ref[p].values[cell] ** 2) for p in pairs))
        r0.append(np.sqrt(sum(np.sum((ref[p].values - sym0[p])[cell] ** 2) for p in pairs)) / den)
        r1.append(np.sqrt(sum(np.sum((ref[p].values - sym1[p])[cell] ** 2) for p in pairs)) / den)
    return OscillationStudy(np.asarray(wavenumbers, float), np.array(r0), np.array(r1))
