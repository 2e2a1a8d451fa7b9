"""Structured grids, nodal fields and finite-difference operators.

Fields live on the nodes of a uniform tensor-product grid. Values are stored
as numpy arrays of shape ``(ny, nx)`` (scalar), ``(ny, nx, 2)`` (vector) or
``(ny, nx, 3)`` (symmetric 2x2 matrix packed as ``[a11, a12, a22]``), so that
C-order flattening of the leading two axes gives the flat node index
``j * nx + i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

NDIM = 2


class GridError(ValueError):
    """Raised for grids that are too small or fields that do not match."""


class EllipticityError(ValueError):
    """Raised when a tensor field is required to be uniformly elliptic but is not."""


@dataclass(frozen=True)
class Grid2D:
    """Uniform node-centred grid over ``[x0, x0+Lx] x [y0, y0+Ly]``."""

    nx: int
    ny: int
    x0: float = 0.0
    y0: float = 0.0
    Lx: float = 1.0
    Ly: float = 1.0

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise GridError(f"grid needs at least 3 nodes per axis, got {self.nx}x{self.ny}")
        if not (self.Lx > 0 and self.Ly > 0):
            raise GridError("grid extents must be positive")

    @classmethod
    def unit_square(cls, n: int) -> "Grid2D":
        return cls(n, n, 0.0, 0.0, 1.0, 1.0)

    @property
    def hx(self) -> float:
        return self.Lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.Ly / (self.ny - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def x(self) -> np.ndarray:
        return self.x0 + self.hx * np.arange(self.nx)

    @property
    def y(self) -> np.ndarray:
        return self.y0 + self.hy * np.arange(self.ny)

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates as two ``(ny, nx)`` arrays."""
        return np.meshgrid(self.x, self.y, indexing="xy")

    def flat_index(self, i, j):
        return np.asarray(j) * self.nx + np.asarray(i)

    def node_index(self, k):
        k = np.asarray(k)
        return k % self.nx, k // self.nx

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[0, :] = mask[-1, :] = True
        mask[:, 0] = mask[:, -1] = True
        return mask

    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask()

    def box_mask(self, x_lo, y_lo, x_hi, y_hi) -> np.ndarray:
        """Nodes inside the closed box ``[x_lo, x_hi] x [y_lo, y_hi]``."""
        X, Y = self.meshgrid()
        eps = 1e-12 * max(self.Lx, self.Ly)
        return (X >= x_lo - eps) & (X <= x_hi + eps) & (Y >= y_lo - eps) & (Y <= y_hi + eps)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class _Field:
    grid: Grid2D
    values: np.ndarray

    ncomp = 1
    kind = ""

    def __post_init__(self):
        expected = self.grid.shape + ((self.ncomp,) if self.ncomp > 1 else ())
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != expected:
            raise GridError(f"{self.kind} field expects shape {expected}, got {vals.shape}")
        object.__setattr__(self, "values", _frozen(vals))

    def _check(self, other: "_Field"):
        if other.grid != self.grid:
            raise GridError("fields live on different grids")

    def __add__(self, other):
        self._check(other)
        return type(self)(self.grid, self.values + other.values)

    def __sub__(self, other):
        self._check(other)
        return type(self)(self.grid, self.values - other.values)

    def __mul__(self, s: float):
        return type(self)(self.grid, self.values * s)

    __rmul__ = __mul__

    def __neg__(self):
        return type(self)(self.grid, -self.values)

    def flat(self) -> np.ndarray:
        """Values in node-major, component-minor order."""
        return self.values.reshape(self.grid.size, self.ncomp).ravel() if self.ncomp > 1 \
            else self.values.ravel()


class ScalarField(_Field):
    ncomp = 1
    kind = "scalar"

    @classmethod
    def from_function(cls, grid: Grid2D, fn: Callable) -> "ScalarField":
        X, Y = grid.meshgrid()
        return cls(grid, np.broadcast_to(np.asarray(fn(X, Y), dtype=float), grid.shape))

    @classmethod
    def zeros(cls, grid: Grid2D) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))


class VectorField(_Field):
    ncomp = NDIM
    kind = "vector"

    @classmethod
    def zeros(cls, grid: Grid2D) -> "VectorField":
        return cls(grid, np.zeros(grid.shape + (NDIM,)))


class SymMatrixField(_Field):
    """Symmetric 2x2 tensor per node, packed ``[a11, a12, a22]``."""

    ncomp = 3
    kind = "symmat"

    @classmethod
    def from_matrices(cls, grid: Grid2D, mats: np.ndarray) -> "SymMatrixField":
        mats = np.asarray(mats, dtype=float)
        return cls(grid, pack_sym(0.5 * (mats + np.swapaxes(mats, -1, -2))))

    @classmethod
    def constant(cls, grid: Grid2D, a11: float, a12: float, a22: float) -> "SymMatrixField":
        return cls(grid, np.broadcast_to(np.array([a11, a12, a22], float), grid.shape + (3,)))

    @classmethod
    def identity(cls, grid: Grid2D) -> "SymMatrixField":
        return cls.constant(grid, 1.0, 0.0, 1.0)

    @classmethod
    def zeros(cls, grid: Grid2D) -> "SymMatrixField":
        return cls(grid, np.zeros(grid.shape + (3,)))

    def matrices(self) -> np.ndarray:
        """Full ``(ny, nx, 2, 2)`` array."""
        return unpack_sym(self.values)

    def eigenvalue_bounds(self) -> tuple[float, float]:
        """Smallest and largest eigenvalue over all nodes."""
        lam = np.linalg.eigvalsh(self.matrices())
        return float(lam[..., 0].min()), float(lam[..., -1].max())

    def is_uniformly_elliptic(self) -> bool:
        return self.eigenvalue_bounds()[0] > 0.0

    def require_elliptic(self) -> tuple[float, float]:
        lo, hi = self.eigenvalue_bounds()
        if not lo > 0.0:
            raise EllipticityError(f"tensor field is not uniformly elliptic (min eigenvalue {lo:.3e})")
        return lo, hi


def pack_sym(mats: np.ndarray) -> np.ndarray:
    return np.stack([mats[..., 0, 0], mats[..., 0, 1], mats[..., 1, 1]], axis=-1)


def unpack_sym(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed)
    out = np.empty(packed.shape[:-1] + (2, 2))
    out[..., 0, 0] = packed[..., 0]
    out[..., 0, 1] = out[..., 1, 0] = packed[..., 1]
    out[..., 1, 1] = packed[..., 2]
    return out


# --------------------------------------------------------------------------
# finite differences on raw arrays
# --------------------------------------------------------------------------

def _check_size(a: np.ndarray):
    if a.shape[0] < 3 or a.shape[1] < 3:
        raise GridError("finite differences need at least 3 nodes per axis")


def grad_array(f: np.ndarray, hx: float, hy: float) -> np.ndarray:
    """Gradient of ``f`` (shape ``(ny, nx, ...)``), stacked on a new last axis.

    Central differences inside, second-order one-sided differences on the
    boundary.
    """
    _check_size(f)
    dfdy, dfdx = np.gradient(f, hy, hx, axis=(0, 1), edge_order=2)
    return np.stack([dfdx, dfdy], axis=-1)


def _second_diff(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    f = np.moveaxis(f, axis, 0)
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - 2.0 * f[1:-1] + f[:-2]) / h**2
    if f.shape[0] >= 4:
        out[0] = (2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) / h**2
        out[-1] = (2.0 * f[-1] - 5.0 * f[-2] + 4.0 * f[-3] - f[-4]) / h**2
    else:
        out[0] = out[-1] = out[1]
    return np.moveaxis(out, 0, axis)


def hessian_array(f: np.ndarray, hx: float, hy: float) -> np.ndarray:
    """Packed Hessian ``[fxx, fxy, fyy]`` of a scalar array."""
    _check_size(f)
    fxx = _second_diff(f, hx, 1)
    fyy = _second_diff(f, hy, 0)
    fxy = np.gradient(np.gradient(f, hx, axis=1, edge_order=2), hy, axis=0, edge_order=2)
    return np.stack([fxx, fxy, fyy], axis=-1)


def div_array(v: np.ndarray, hx: float, hy: float) -> np.ndarray:
    """Divergence of a vector array ``(ny, nx, 2)``."""
    return (np.gradient(v[..., 0], hx, axis=1, edge_order=2)
            + np.gradient(v[..., 1], hy, axis=0, edge_order=2))


def gradient(f: ScalarField) -> VectorField:
    g = f.grid
    return VectorField(g, grad_array(f.values, g.hx, g.hy))


def hessian(f: ScalarField) -> SymMatrixField:
    g = f.grid
    return SymMatrixField(g, hessian_array(f.values, g.hx, g.hy))


def tensor_divergence(gamma: SymMatrixField) -> VectorField:
    """Row divergence ``(div gamma)_j = sum_i d_i gamma_ij``."""
    g = gamma.grid
    m = gamma.matrices()
    cols = [div_array(m[..., :, j], g.hx, g.hy) for j in range(NDIM)]
    return VectorField(g, np.stack(cols, axis=-1))


# --------------------------------------------------------------------------
# norms
# --------------------------------------------------------------------------

def quadrature_weights(grid: Grid2D) -> np.ndarray:
    """Tensor trapezoid weights on the nodes, shape ``(ny, nx)``."""
    wx = np.full(grid.nx, grid.hx)
    wy = np.full(grid.ny, grid.hy)
    wx[[0, -1]] *= 0.5
    wy[[0, -1]] *= 0.5
    return np.outer(wy, wx)


def _integrate(density: np.ndarray, grid: Grid2D, region: np.ndarray | None = None) -> float:
    w = quadrature_weights(grid)
    if region is not None:
        w = w * region
    d = np.asarray(density)
    return float(np.sum(w.reshape(w.shape + (1,) * (d.ndim - 2)) * d))


def l2_norm(values: np.ndarray, grid: Grid2D, region: np.ndarray | None = None) -> float:
    """Discrete L2 norm (trapezoid rule), summing over any trailing components.

    ``region`` (boolean ``(ny, nx)``) restricts the integral to a node subset.
    """
    v = np.asarray(values)
    return float(np.sqrt(_integrate(v * v, grid, region)))


def sym_l2_norm(packed: np.ndarray, grid: Grid2D, region: np.ndarray | None = None) -> float:
    """L2 norm of a packed symmetric field using the Frobenius norm per node."""
    p = np.asarray(packed)
    sq = p[..., 0] ** 2 + 2.0 * p[..., 1] ** 2 + p[..., 2] ** 2
    return float(np.sqrt(_integrate(sq, grid, region)))


def h1_norm(values: np.ndarray, grid: Grid2D, region: np.ndarray | None = None) -> float:
    """Discrete H1 norm of a scalar array: sqrt(||f||^2 + ||grad f||^2).

    The gradient is taken on the whole grid before restricting to ``region``.
    """
    g = grad_array(np.asarray(values, dtype=float), grid.hx, grid.hy)
    return float(np.hypot(l2_norm(values, grid, region), l2_norm(g, grid, region)))


# --------------------------------------------------------------------------
# small per-node matrix algebra
# --------------------------------------------------------------------------

def inv2(m: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a stack of 2x2 matrices."""
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1]
    out[..., 1, 1] = m[..., 0, 0]
    out[..., 0, 1] = -m[..., 0, 1]
    out[..., 1, 0] = -m[..., 1, 0]
    return out / det[..., None, None]


def det2(m: np.ndarray) -> np.ndarray:
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


def sqrtm_spd(m: np.ndarray) -> np.ndarray:
    """SPD square root of a stack of symmetric matrices."""
    lam, q = np.linalg.eigh(m)
    if np.any(lam <= 0.0):
        raise EllipticityError("matrix square root requires a positive definite tensor")
    return np.einsum("...ik,...k,...jk->...ij", q, np.sqrt(lam), q)


# --------------------------------------------------------------------------
# spherical / deviatoric split
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Decomposition:
    """``gamma = (1/n) trace_part * gamma0 + deviatoric_part``."""

    trace_part: ScalarField
    deviatoric_part: SymMatrixField
    gamma0: SymMatrixField = field(repr=False)

    def recompose(self) -> SymMatrixField:
        t = self.trace_part.values[..., None]
        return SymMatrixField(self.trace_part.grid,
                              t / NDIM * self.gamma0.values + self.deviatoric_part.values)


def relative_trace(gamma: np.ndarray, gamma0: np.ndarray) -> np.ndarray:
    """``tr(gamma0^{-1} gamma)`` for stacks of full matrices."""
    return np.einsum("...ij,...ji->...", inv2(gamma0), gamma)


def decompose(gamma: SymMatrixField, gamma0: SymMatrixField) -> Decomposition:
    """Split ``gamma`` into its trace part relative to ``gamma0`` and a deviatoric rest."""
    gamma0._check(gamma)
    gamma0.require_elliptic()
    t = relative_trace(gamma.matrices(), gamma0.matrices())
    dev = gamma.values - t[..., None] / NDIM * gamma0.values
    return Decomposition(ScalarField(gamma.grid, t), SymMatrixField(gamma.grid, dev), gamma0)
