"""Hypothesis checks and the frame quantities built from background solutions.

Conventions
-----------
The coefficients ``r_i = mu_i / mu`` are defined by the linear relation

    sum_i r_i grad u_i + grad u_{n+1} = 0,

solved node by node. ``Z_i = grad r_i`` are the columns of ``Z``; the dual
frame is ``Z* = Z^{-T}``. Note the determinant-ratio formula (Cramer's rule
applied to ``+grad u_{n+1}``) gives ``-r_i``; see :func:`mu_ratios_cramer`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import (NDIM, EllipticityError, SymMatrixField, det2, grad_array,
                     inv2, pack_sym, sqrtm_spd, unpack_sym)
from .measure import SolutionSet

DEFAULT_C0 = 1e-6
DEFAULT_SIGMA_MIN = 1e-6


class HypothesisError(ValueError):
    """A hypothesis mask fails inside the region where it is required."""


@dataclass(frozen=True)
class HypothesisReport:
    name: str
    threshold: float
    values: np.ndarray          # per-node quantity compared to the threshold
    mask: np.ndarray            # True where satisfied

    @property
    def min_value(self) -> float:
        return float(self.values.min())

    def satisfied_on(self, region: np.ndarray | None = None) -> bool:
        region = np.ones_like(self.mask) if region is None else region
        return bool(np.all(self.mask[region]))

    def summary(self, region: np.ndarray | None = None) -> str:
        region = np.ones_like(self.mask) if region is None else region
        frac = float(np.mean(self.mask[region]))
        status = "pass" if self.satisfied_on(region) else "FAIL"
        return (f"{self.name}: min = {self.values[region].min():.6e}, threshold = {self.threshold:.3e}, "
                f"satisfied fraction = {frac:.4f} [{status}]")


def check_hyp_det(sset: SolutionSet, c0: float = DEFAULT_C0) -> HypothesisReport:
    """``det(grad u_1, ..., grad u_n) >= c0`` per node."""
    if sset.m < NDIM:
        raise ValueError(f"need at least {NDIM} solutions, have {sset.m}")
    d = det2(sset.grad_u_matrix())
    return HypothesisReport("det(grad U)", c0, d, d >= c0)


def compute_mu(sset: SolutionSet, mask: np.ndarray | None = None) -> np.ndarray:
    """Ratios ``r_i = mu_i / mu`` (with ``mu = 1``), shape ``(ny, nx, n)``.

    Raises HypothesisError if ``[grad U]`` is singular at a node inside ``mask``.
    """
    if sset.m < NDIM + 1:
        raise ValueError(f"need {NDIM + 1} solutions to form the linear relation, have {sset.m}")
    U = sset.grad_u_matrix()
    rhs = -sset.solutions[NDIM].grad
    d = det2(U)
    scale = np.abs(U).max(axis=(-2, -1)) ** 2
    singular = np.abs(d) <= 1e-14 * np.maximum(scale, 1e-300)
    if mask is not None and np.any(singular & mask):
        raise HypothesisError("[grad U] is singular at a node where the determinant hypothesis is required")
    Usafe = np.where(singular[..., None, None], np.eye(NDIM), U)
    r = np.linalg.solve(Usafe, rhs[..., None])[..., 0]
    r[singular] = 0.0
    return r


def mu_ratios_cramer(sset: SolutionSet) -> np.ndarray:
    """Determinant ratios ``det(.., grad u_{n+1} in slot i, ..) / det(grad U)``.

    Equal to ``-compute_mu`` wherever ``[grad U]`` is invertible.
    """
    U = sset.grad_u_matrix()
    w = sset.solutions[NDIM].grad
    d = det2(U)
    out = np.empty(U.shape[:-1])
    for i in range(NDIM):
        Ui = U.copy()
        Ui[..., :, i] = w
        out[..., i] = det2(Ui) / d
    return out


def compute_Z(sset_or_grid, mu: np.ndarray):
    """``Z = [grad r_1 | ... | grad r_n]`` and its per-node condition number."""
    grid = getattr(sset_or_grid, "grid", sset_or_grid)
    Z = grad_array(mu, grid.hx, grid.hy)        # (ny, nx, i, k) = d_k r_i
    Z = np.swapaxes(Z, -1, -2)                  # column i is grad r_i
    s = np.linalg.svd(Z, compute_uv=False)
    with np.errstate(divide="ignore"):
        cond = np.where(s[..., -1] > 0, s[..., 0] / np.where(s[..., -1] > 0, s[..., -1], 1.0), np.inf)
    return Z, cond


def check_hyp_Z(Z: np.ndarray, threshold: float = DEFAULT_SIGMA_MIN) -> HypothesisReport:
    """Smallest singular value of ``Z`` per node compared to ``threshold``."""
    s = np.linalg.svd(Z, compute_uv=False)[..., -1]
    mask = s > threshold if threshold == 0 else s >= threshold
    return HypothesisReport("sigma_min(Z)", threshold, s, mask)


def dual_frame(Z: np.ndarray) -> np.ndarray:
    """``Z* = Z^{-T}`` (columns ``Z*_i`` with ``Z*_i . Z_j = delta_ij``)."""
    return np.swapaxes(inv2(Z), -1, -2)


def compute_Mmat(sset: SolutionSet, mu: np.ndarray, Z: np.ndarray | None = None):
    """``M = sum_i r_i A0 hess(u_i) A0 + A0 hess(u_{n+1}) A0`` (``mu = 1``).

    Returns ``(M_hessian, M_frame)`` as full ``(ny, nx, 2, 2)`` arrays, where
    ``M_frame = -A0 Z [grad U]^T A0`` is the first-order expression of the
    same object. ``Z`` defaults to :func:`compute_Z` of ``mu``.
    """
    try:
        A0 = sqrtm_spd(sset.gamma0.matrices())
    except EllipticityError as exc:
        raise EllipticityError(f"cannot form A0 = sqrt(gamma0): {exc}") from exc
    hs = [unpack_sym(s.hess) for s in sset.solutions]
    S = hs[NDIM].copy()
    for i in range(NDIM):
        S += mu[..., i, None, None] * hs[i]
    M_h = A0 @ S @ A0
    if Z is None:
        Z, _ = compute_Z(sset, mu)
    M_f = -A0 @ Z @ np.swapaxes(sset.grad_u_matrix(), -1, -2) @ A0
    return M_h, M_f


@dataclass(frozen=True)
class FrameData:
    detU: np.ndarray
    mu: np.ndarray
    Z: np.ndarray
    Zstar: np.ndarray
    Mmat: SymMatrixField
    Mmat_frame: np.ndarray
    cond_Z: np.ndarray
    det_report: HypothesisReport
    Z_report: HypothesisReport

    @property
    def M_discrepancy(self) -> np.ndarray:
        """Per-node max-entry difference between the two expressions of M."""
        return np.abs(self.Mmat.matrices() - self.Mmat_frame).max(axis=(-2, -1))

    def duality_defect(self) -> np.ndarray:
        """``|Z*^T Z - I|`` per node."""
        P = np.swapaxes(self.Zstar, -1, -2) @ self.Z
        return np.abs(P - np.eye(NDIM)).max(axis=(-2, -1))


def compute_frames(sset: SolutionSet, c0: float = DEFAULT_C0, sigma_min: float = DEFAULT_SIGMA_MIN,
                   region: np.ndarray | None = None) -> FrameData:
    """All frame quantities, with hypothesis reports against ``c0`` and ``sigma_min``.

    ``region`` restricts where a singular ``[grad U]`` is a hard error.
    """
    det_rep = check_hyp_det(sset, c0)
    mask = det_rep.mask if region is None else det_rep.mask & region
    mu = compute_mu(sset, mask)
    Z, cond = compute_Z(sset, mu)
    z_rep = check_hyp_Z(Z, sigma_min)
    ok = (z_rep.values > 0) & (det2(Z) != 0)
    Zstar = dual_frame(np.where(ok[..., None, None], Z, np.eye(NDIM)))
    Zstar[~ok] = 0.0
    M_h, M_f = compute_Mmat(sset, mu, Z)
    return FrameData(det_rep.values, mu, Z, Zstar, SymMatrixField(sset.grid, pack_sym(M_h)),
                     M_f, cond, det_rep, z_rep)

