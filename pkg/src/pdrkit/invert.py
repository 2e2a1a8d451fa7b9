"""Explicit reconstruction of a conductivity perturbation from linearised power densities.

Pipeline (n = 2, index ranges ``i, p, q < n``, solution ``n`` is the extra one):

1. frames: ratios ``r_i``, ``Z_i = grad r_i`` and the dual frame ``Z*``;
2. ``Y_q = grad(H^{pq} (dH_{n,p} + r_i dH_{ip}))``,
   ``f = (H^{pq} dH_{ip} Z_i - Y_q) . gamma0 grad u_q`` and the 2-form
   ``omega = Y_q ^ du_q``;
3. ``W_ij = (div gamma0 - (gamma0 Z_p . grad) Z*_p) delta_ij - [Z*_i, gamma0 Z_j]`` and
   ``f_i = -Z*_i . grad f + (gamma0 Z_p . grad)(omega(Z*_p, Z*_i))``;
4. one sparse solve of ``-div(gamma0 grad v_i) + W_ij . grad v_j = f_i``, ``v_i = 0`` on the boundary;
5. ``gamma = gamma0 ([grad U] H^-1 dH H^-1 [grad U]^T - [grad V] H^-1 [grad U]^T - transpose) gamma0``
   and ``tr(gamma0^-1 gamma) = tr(H^-1 dH) - 2 tr([grad V][grad U]^-1)``.

In two dimensions a 2-form is stored as its single coefficient, with
``omega(a, b) = omega_s (a_x b_y - a_y b_x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .elliptic import EllipticOperator, SolverError
from .fields import (NDIM, Grid2D, ScalarField, SymMatrixField, grad_array, h1_norm, inv2, l2_norm,
                     relative_trace, sym_l2_norm, tensor_divergence)
from .frames import DEFAULT_C0, DEFAULT_SIGMA_MIN, FrameData, HypothesisError, compute_frames
from .measure import MeasurementSet, MissingMeasurementError, SolutionSet, lpd_pairs


class ReconstructionError(RuntimeError):
    """Failure inside the reconstruction pipeline, tagged with the stage."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


class FredholmError(SolverError):
    """The coupled system is singular or numerically close to it."""


# --------------------------------------------------------------------------
# small helpers on node arrays
# --------------------------------------------------------------------------

def _grad(a: np.ndarray, grid: Grid2D) -> np.ndarray:
    return grad_array(a, grid.hx, grid.hy)


def directional(X: np.ndarray, Y: np.ndarray, grid: Grid2D) -> np.ndarray:
    """``(X . grad) Y`` for vector fields ``X, Y`` of shape ``(ny, nx, 2)``."""
    dY = _grad(Y, grid)                          # (.., c, k) = d_k Y_c
    return np.einsum("...k,...ck->...c", X, dY)


def lie_bracket(X: np.ndarray, Y: np.ndarray, grid: Grid2D) -> np.ndarray:
    """``[X, Y] = (X . grad) Y - (Y . grad) X``."""
    return directional(X, Y, grid) - directional(Y, X, grid)


def wedge(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Coefficient of ``a^flat ^ b^flat`` on ``dx ^ dy``."""
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


# --------------------------------------------------------------------------
# algebraic recovery of gamma from v
# --------------------------------------------------------------------------

def _grad_v_matrix(v, grid: Grid2D) -> np.ndarray:
    return np.stack([_grad(vk.values, grid) for vk in v[:NDIM]], axis=-1)


def gamma_from_v(sset: SolutionSet, mset: MeasurementSet, v) -> SymMatrixField:
    """``gamma`` from ``dH`` and the gradients of ``v_1..v_n``."""
    grid = sset.grid
    U = sset.grad_u_matrix()
    V = _grad_v_matrix(v, grid)
    Hi = inv2(mset.H_matrix())
    dH = mset.dH_matrix()
    g0 = sset.gamma0.matrices()
    UT = np.swapaxes(U, -1, -2)
    core = U @ Hi @ dH @ Hi @ UT - V @ Hi @ UT - U @ Hi @ np.swapaxes(V, -1, -2)
    g = g0 @ core @ g0
    return SymMatrixField.from_matrices(grid, g)


def trace_from_v(sset: SolutionSet, mset: MeasurementSet, v) -> ScalarField:
    """``tr(gamma0^-1 gamma) = tr(H^-1 dH) - 2 tr([grad V][grad U]^-1)``."""
    grid = sset.grid
    U = sset.grad_u_matrix()
    V = _grad_v_matrix(v, grid)
    Hi = inv2(mset.H_matrix())
    t = np.einsum("...ij,...ji->...", Hi, mset.dH_matrix())
    t = t - 2.0 * np.einsum("...ii->...", V @ inv2(U))
    return ScalarField(grid, t)


# --------------------------------------------------------------------------
# data terms
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class YOmegaF:
    Y: np.ndarray        # (ny, nx, 2 components, n) column q is Y_q
    omega: np.ndarray    # (ny, nx) coefficient of dx^dy
    f: np.ndarray        # (ny, nx)


def build_Y_omega_f(sset: SolutionSet, mset: MeasurementSet, frames: FrameData) -> YOmegaF:
    grid = sset.grid
    n = NDIM
    Hi = inv2(mset.H_matrix(n))
    r = frames.mu
    s = np.empty(grid.shape + (n,))
    for p in range(n):
        acc = mset.get_dH(n, p).values.copy()
        for i in range(n):
            acc += r[..., i] * mset.get_dH(i, p).values
        s[..., p] = acc
    phi = np.einsum("...pq,...p->...q", Hi, s)           # H^{pq} s_p
    Y = np.stack([_grad(phi[..., q], grid) for q in range(n)], axis=-1)
    U = sset.grad_u_matrix()
    g0U = sset.gamma0.matrices() @ U                    # column q: gamma0 grad u_q
    dH = mset.dH_matrix(n)
    # coefficient c_{iq} = H^{pq} dH_{ip}
    c = np.einsum("...pq,...ip->...iq", Hi, dH)
    Zg = np.einsum("...ki,...kq->...iq", frames.Z, g0U)  # Z_i . gamma0 grad u_q
    f = np.einsum("...iq,...iq->...", c, Zg) - np.einsum("...kq,...kq->...", Y, g0U)
    omega = sum(wedge(Y[..., q], U[..., q]) for q in range(n))
    return YOmegaF(Y, omega, f)


@dataclass(frozen=True)
class WF:
    W: np.ndarray        # (ny, nx, n, n, 2): W[..., i, j, :] is the vector field W_ij
    f: np.ndarray        # (ny, nx, n)


def build_W(frames: FrameData, gamma0: SymMatrixField) -> np.ndarray:
    grid = gamma0.grid
    n = NDIM
    g0 = gamma0.matrices()
    Z, Zs = frames.Z, frames.Zstar
    g0Z = g0 @ Z                                       # column p: gamma0 Z_p
    base = tensor_divergence(gamma0).values.copy()
    for p in range(n):
        base -= directional(g0Z[..., p], Zs[..., p], grid)
    W = np.zeros(grid.shape + (n, n, 2))
    for i in range(n):
        for j in range(n):
            W[..., i, j, :] = -lie_bracket(Zs[..., i], g0Z[..., j], grid)
        W[..., i, i, :] += base
    return W


def build_W_f(frames: FrameData, ywf: YOmegaF, gamma0: SymMatrixField) -> WF:
    grid = gamma0.grid
    n = NDIM
    W = build_W(frames, gamma0)
    Zs = frames.Zstar
    g0Z = gamma0.matrices() @ frames.Z
    gf = _grad(ywf.f, grid)
    fi = np.empty(grid.shape + (n,))
    for i in range(n):
        acc = -np.einsum("...k,...k->...", Zs[..., i], gf)
        for p in range(n):
            w = ywf.omega * wedge(Zs[..., p], Zs[..., i])
            acc += np.einsum("...k,...k->...", g0Z[..., p], _grad(w, grid))
        fi[..., i] = acc
    return WF(W, fi)


# --------------------------------------------------------------------------
# coupled system
# --------------------------------------------------------------------------

def _central_difference_matrices(grid: Grid2D):
    nx, ny = grid.nx, grid.ny
    cx = sp.diags([-np.ones(nx - 1), np.ones(nx - 1)], [-1, 1], shape=(nx, nx)) / (2 * grid.hx)
    cy = sp.diags([-np.ones(ny - 1), np.ones(ny - 1)], [-1, 1], shape=(ny, ny)) / (2 * grid.hy)
    Dx = sp.kron(sp.identity(ny), cx).tocsr()
    Dy = sp.kron(cy, sp.identity(nx)).tocsr()
    return Dx, Dy


@dataclass
class CoupledSystem:
    """Block system over ``n`` copies of the interior unknowns."""

    op: EllipticOperator
    W: np.ndarray
    rhs: np.ndarray                       # (ny, nx, n)
    matrix: sp.csc_matrix = field(init=False, repr=False)

    def __post_init__(self):
        op = self.op
        grid = op.grid
        interior = op.interior
        Dx, Dy = _central_difference_matrices(grid)
        Dx = Dx[interior][:, interior]
        Dy = Dy[interior][:, interior]
        blocks = []
        for i in range(NDIM):
            row = []
            for j in range(NDIM):
                wx = self.W[..., i, j, 0].ravel()[interior]
                wy = self.W[..., i, j, 1].ravel()[interior]
                B = sp.diags(wx) @ Dx + sp.diags(wy) @ Dy
                if i == j:
                    B = op.A + B
                row.append(B)
            blocks.append(row)
        self.matrix = sp.bmat(blocks, format="csc")

    @property
    def rhs_vector(self) -> np.ndarray:
        return np.concatenate([self.rhs[..., i].ravel()[self.op.interior] for i in range(NDIM)])

    def is_decoupled(self) -> bool:
        return not np.any(self.W)


@dataclass(frozen=True)
class CoupledSolution:
    v: list
    residual: float
    injectivity: float | None    # sigma_min(coupled) / sigma_min(L0), diagnostics mode only


def _smallest_singular_value(solve, solve_t, size: int, iters: int = 30, seed: int = 0) -> float:
    """``1 / ||A^-1||_2`` by power iteration on ``A^-T A^-1``."""
    x = np.random.default_rng(seed).standard_normal(size)
    x /= np.linalg.norm(x)
    norm = 0.0
    for _ in range(iters):
        y = solve_t(solve(x))
        norm = np.linalg.norm(y)
        if not np.isfinite(norm) or norm == 0.0:
            return 0.0
        x = y / norm
    return float(1.0 / np.sqrt(norm))


def solve_coupled(system: CoupledSystem, diagnostics: bool = False,
                  min_injectivity: float = 1e-8, monolithic: bool = False) -> CoupledSolution:
    """Monolithic sparse LU solve of the coupled system.

    In diagnostics mode the smallest singular value of the block matrix is
    estimated and divided by that of the ``L0`` block. Values near zero
    indicate that ``-1`` is (close to) an eigenvalue of the compact part and
    raise FredholmError. The ratio is a proxy, not a proof of injectivity.
    ``monolithic=True`` factorises the full block matrix even when ``W = 0``.
    """
    op = system.op
    b = system.rhs_vector
    n_int = op.n_interior

    def block_solve(y):
        return op.solve_interior(y.reshape(NDIM, n_int).T).T.ravel()

    if system.is_decoupled() and not monolithic:
        # block-diagonal: reuse the L0 factorisation
        solve = solve_t = block_solve
    else:
        try:
            lu = spla.splu(system.matrix)
        except RuntimeError as exc:
            raise FredholmError(f"coupled system is singular: {exc}") from exc
        solve = lu.solve
        solve_t = lambda y: lu.solve(y, trans="T")  # noqa: E731
    x = solve(b)
    if not np.all(np.isfinite(x)):
        raise FredholmError("coupled solve produced non-finite values")
    res = float(np.linalg.norm(system.matrix @ x - b) / max(np.linalg.norm(b), 1e-300))
    ratio = None
    if diagnostics:
        size = system.matrix.shape[0]
        s_coupled = _smallest_singular_value(solve, solve_t, size)
        s_block = _smallest_singular_value(block_solve, block_solve, size)
        ratio = s_coupled / s_block
        if ratio < min_injectivity:
            raise FredholmError(f"coupled system is numerically singular "
                                f"(sigma_min ratio {ratio:.3e} < {min_injectivity:.1e})")
    v = [op._expand(x[k * n_int:(k + 1) * n_int]) for k in range(NDIM)]
    return CoupledSolution(v, res, ratio)


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------

def divergence_constraint_residual(sset, frames: FrameData, ywf: YOmegaF, v) -> np.ndarray:
    """``sum_p gamma0 Z_p . grad v_p - f``."""
    grid = sset.grid
    g0Z = sset.gamma0.matrices() @ frames.Z
    acc = -ywf.f.copy()
    for p in range(NDIM):
        acc += np.einsum("...k,...k->...", g0Z[..., p], _grad(v[p].values, grid))
    return acc


def wedge_constraint_residual(sset, frames: FrameData, ywf: YOmegaF, v) -> np.ndarray:
    """``sum_i Z_i ^ dv_i - omega``."""
    grid = sset.grid
    acc = -ywf.omega.copy()
    for i in range(NDIM):
        acc += wedge(frames.Z[..., i], _grad(v[i].values, grid))
    return acc


def gradient_equation_residual(sset: SolutionSet, mset: MeasurementSet, v, gamma: SymMatrixField,
                               trace: ScalarField) -> np.ndarray:
    """Residual of the linearised gradient equation for ``tr(gamma0^-1 gamma)``.

    ``1/2 grad t = 1/2 grad tr(H^-1 dH) + (grad H^{jl} . gamma0 grad u_l) grad v_j
    + (grad H^{jl} . gamma0 grad v_l) grad u_j + (grad H^{jl} . gamma grad u_l) grad u_j
    - (grad (H^-1 dH H^-1)^{jl} . gamma0 grad u_l) grad u_j``
    """
    grid = sset.grid
    n = NDIM
    Hi = inv2(mset.H_matrix(n))
    dH = mset.dH_matrix(n)
    K = Hi @ dH @ Hi
    g0 = sset.gamma0.matrices()
    gm = gamma.matrices()
    U = sset.grad_u_matrix()
    V = _grad_v_matrix(v, grid)
    dHi = _grad(Hi, grid)                # (.., j, l, k)
    dK = _grad(K, grid)
    g0U, g0V, gU = g0 @ U, g0 @ V, gm @ U
    rhs = 0.5 * _grad(np.einsum("...ij,...ji->...", Hi, dH), grid)
    rhs += np.einsum("...jlk,...kl,...cj->...c", dHi, g0U, V)
    rhs += np.einsum("...jlk,...kl,...cj->...c", dHi, g0V, U)
    rhs += np.einsum("...jlk,...kl,...cj->...c", dHi, gU, U)
    rhs -= np.einsum("...jlk,...kl,...cj->...c", dK, g0U, U)
    return 0.5 * _grad(trace.values, grid) - rhs


# --------------------------------------------------------------------------
# full pipeline
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ReconstructionConfig:
    c0: float = DEFAULT_C0
    sigma_min: float = DEFAULT_SIGMA_MIN
    subdomain: tuple[float, float, float, float] | None = None
    force: bool = False
    diagnostics: bool = False


@dataclass(frozen=True)
class InversionResult:
    v: list
    gamma: SymMatrixField
    trace: ScalarField
    frames: FrameData
    ywf: YOmegaF
    wf: WF
    diagnostics: dict
    region: np.ndarray


def _region(grid: Grid2D, config: ReconstructionConfig) -> np.ndarray:
    if config.subdomain is None:
        return np.ones(grid.shape, dtype=bool)
    return grid.box_mask(*config.subdomain)


def reconstruct(sset: SolutionSet, mset: MeasurementSet,
                config: ReconstructionConfig = ReconstructionConfig()) -> InversionResult:
    """Run the whole explicit inversion from ``(background, dH)`` to ``(v, gamma, trace)``."""
    grid = sset.grid
    if mset.grid != grid:
        raise ReconstructionError("input", ValueError("measurement grid differs from background grid"))
    missing = [p for p in lpd_pairs(NDIM) if p not in mset.dH]
    if missing:
        raise ReconstructionError("input", MissingMeasurementError("dH", missing[0]))
    region = _region(grid, config)

    try:
        frames = compute_frames(sset, config.c0, config.sigma_min, region)
    except Exception as exc:
        raise ReconstructionError("frames", exc) from exc
    if not config.force:
        for rep in (frames.det_report, frames.Z_report):
            if not rep.satisfied_on(region):
                raise ReconstructionError("hypotheses", HypothesisError(rep.summary(region)))

    try:
        ywf = build_Y_omega_f(sset, mset, frames)
    except Exception as exc:
        raise ReconstructionError("Y/omega/f", exc) from exc
    try:
        wf = build_W_f(frames, ywf, sset.gamma0)
    except Exception as exc:
        raise ReconstructionError("W/f_i", exc) from exc
    try:
        system = CoupledSystem(sset.op, wf.W, wf.f)
        sol = solve_coupled(system, diagnostics=config.diagnostics)
    except Exception as exc:
        raise ReconstructionError("coupled-solve", exc) from exc
    try:
        gamma = gamma_from_v(sset, mset, sol.v)
        trace = trace_from_v(sset, mset, sol.v)
    except Exception as exc:
        raise ReconstructionError("gamma", exc) from exc

    g0 = sset.gamma0.matrices()
    grad_res = gradient_equation_residual(sset, mset, sol.v, gamma, trace)
    diag = {
        "coupled_residual": sol.residual,
        "injectivity_ratio": sol.injectivity,
        "W_max": float(np.abs(wf.W).max()),
        "trace_consistency": float(np.abs(trace.values - relative_trace(gamma.matrices(), g0)).max()),
        "gradient_equation_residual_l2": l2_norm(grad_res, grid, region),
        "divergence_constraint_residual_l2": l2_norm(
            divergence_constraint_residual(sset, frames, ywf, sol.v), grid, region),
        "wedge_constraint_residual_l2": l2_norm(
            wedge_constraint_residual(sset, frames, ywf, sol.v), grid, region),
        "min_det": float(frames.det_report.values[region].min()),
        "min_sigma_Z": float(frames.Z_report.values[region].min()),
    }
    return InversionResult(sol.v, gamma, trace, frames, ywf, wf, diag, region)


# --------------------------------------------------------------------------
# error metrics
# --------------------------------------------------------------------------

def relative_errors(result: InversionResult, gamma_true: SymMatrixField, gamma0: SymMatrixField,
                    region: np.ndarray | None = None) -> dict:
    """Relative L2 error of gamma and relative H1 error of the trace.

    A truth of zero norm makes the ratio meaningless; the absolute error is
    reported instead.
    """
    grid = gamma_true.grid
    dg = result.gamma.values - gamma_true.values
    t_true = relative_trace(gamma_true.matrices(), gamma0.matrices())
    gl2 = _ratio(sym_l2_norm(dg, grid, region), sym_l2_norm(gamma_true.values, grid, region))
    th1 = _ratio(h1_norm(result.trace.values - t_true, grid, region), h1_norm(t_true, grid, region))
    return {"rel_l2_gamma": gl2, "rel_h1_trace": th1}


def _ratio(err: float, ref: float) -> float:
    return err / ref if ref > 0 else err
