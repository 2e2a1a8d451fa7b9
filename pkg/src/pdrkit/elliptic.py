"""Finite-difference solver for ``-div(gamma0 grad u) = rhs`` with Dirichlet data.

The operator is assembled in flux form: the diagonal tensor entries act on
edge differences (5-point part), the off-diagonal entry acts on
cell-averaged gradients (the four corners of each cell), which gives a
symmetric 9-point stencil. The same bilinear form is used to build the
right-hand side of the perturbation equation, so the discrete map
``gamma -> v`` is the exact derivative of the discrete forward map.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import EllipticityError, GridError, Grid2D, ScalarField, SymMatrixField


class SolverError(RuntimeError):
    """Factorisation or iterative solve broke down."""


def _difference_matrices(grid: Grid2D):
    """Edge and cell difference operators acting on nodal vectors."""
    nx, ny = grid.nx, grid.ny
    ex = sp.diags([-np.ones(nx - 1), np.ones(nx - 1)], [0, 1], shape=(nx - 1, nx))
    ey = sp.diags([-np.ones(ny - 1), np.ones(ny - 1)], [0, 1], shape=(ny - 1, ny))
    ax = sp.diags([np.full(nx - 1, 0.5), np.full(nx - 1, 0.5)], [0, 1], shape=(nx - 1, nx))
    ay = sp.diags([np.full(ny - 1, 0.5), np.full(ny - 1, 0.5)], [0, 1], shape=(ny - 1, ny))
    Iy, Ix = sp.identity(ny), sp.identity(nx)
    # flat index j*nx + i  ->  kron(Y-operator, X-operator)
    dxe = sp.kron(Iy, ex) / grid.hx            # x-edges (ny, nx-1)
    dye = sp.kron(ey, Ix) / grid.hy            # y-edges (ny-1, nx)
    gx = sp.kron(ay, ex) / grid.hx             # cell-centred d/dx (ny-1, nx-1)
    gy = sp.kron(ey, ax) / grid.hy             # cell-centred d/dy
    return dxe.tocsr(), dye.tocsr(), gx.tocsr(), gy.tocsr()


def _edge_cell_coefficients(gamma: SymMatrixField):
    v = gamma.values
    a, b, c = v[..., 0], v[..., 1], v[..., 2]
    a_edge = 0.5 * (a[:, 1:] + a[:, :-1])
    c_edge = 0.5 * (c[1:, :] + c[:-1, :])
    b_cell = 0.25 * (b[1:, 1:] + b[1:, :-1] + b[:-1, 1:] + b[:-1, :-1])
    return a_edge.ravel(), c_edge.ravel(), b_cell.ravel()


def assemble_stiffness(gamma: SymMatrixField) -> sp.csr_matrix:
    """Full-node matrix ``K`` with ``(K u)_k ~ -div(gamma grad u)`` at interior nodes.

    ``gamma`` need not be elliptic here; it is also used for perturbation
    right-hand sides.
    """
    dxe, dye, gx, gy = _difference_matrices(gamma.grid)
    a, c, b = _edge_cell_coefficients(gamma)
    K = (dxe.T @ sp.diags(a) @ dxe + dye.T @ sp.diags(c) @ dye
         + gx.T @ sp.diags(b) @ gy + gy.T @ sp.diags(b) @ gx)
    return K.tocsr()


class EllipticOperator:
    """Discrete ``L0 = -div(gamma0 grad .)`` with a factorisation over interior nodes.

    Immutable after construction; ``solve_*`` methods may be called
    concurrently.
    """

    def __init__(self, gamma0: SymMatrixField, method: str = "direct", tol: float = 1e-10):
        gamma0.require_elliptic()
        if method not in ("direct", "cg"):
            raise ValueError(f"unknown solver method {method!r}")
        self.grid = gamma0.grid
        self.gamma0 = gamma0
        self.method = method
        self.tol = tol
        self.K = assemble_stiffness(gamma0)
        interior = self.grid.interior_mask().ravel()
        self.interior = np.flatnonzero(interior)
        self.boundary = np.flatnonzero(~interior)
        Kr = self.K[self.interior]
        self.A = Kr[:, self.interior].tocsc()
        self.A_ib = Kr[:, self.boundary].tocsr()
        self._lu = None
        if method == "direct":
            try:
                self._lu = spla.splu(self.A)
            except RuntimeError as exc:
                raise SolverError(f"factorisation of L0 failed: {exc}") from exc

    @property
    def n_interior(self) -> int:
        return self.interior.size

    def solve_interior(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``A x = rhs`` on interior unknowns (rhs may have several columns)."""
        rhs = np.asarray(rhs, dtype=float)
        if self._lu is not None:
            x = self._lu.solve(rhs)
            x += self._lu.solve(rhs - self.A @ x)      # one step of iterative refinement
        else:
            cols = rhs.reshape(rhs.shape[0], -1)
            out = np.empty_like(cols)
            for k in range(cols.shape[1]):
                out[:, k], info = spla.cg(self.A, cols[:, k], rtol=self.tol, atol=0.0,
                                          maxiter=20 * self.n_interior)
                if info != 0:
                    raise SolverError(f"conjugate gradient did not converge (info={info})")
            x = out.reshape(rhs.shape)
        if not np.all(np.isfinite(x)):
            raise SolverError("solve produced non-finite values; L0 is singular or not elliptic")
        return x

    def _expand(self, x_int: np.ndarray, g_bnd: np.ndarray | None = None) -> ScalarField:
        u = np.zeros(self.grid.size)
        u[self.interior] = x_int
        if g_bnd is not None:
            u[self.boundary] = g_bnd
        return ScalarField(self.grid, u.reshape(self.grid.shape))

    def _check(self, f):
        if f.grid != self.grid:
            raise GridError("field grid does not match the operator grid")

    def solve_dirichlet(self, g: ScalarField, rhs: ScalarField | None = None) -> ScalarField:
        """Solve ``-div(gamma0 grad u) = rhs``, ``u = g`` on the boundary.

        Only the boundary values of ``g`` are read.
        """
        self._check(g)
        gb = g.values.ravel()[self.boundary]
        b = -(self.A_ib @ gb)
        if rhs is not None:
            self._check(rhs)
            b = b + rhs.values.ravel()[self.interior]
        return self._expand(self.solve_interior(b), gb)

    def solve_zero_dirichlet(self, rhs: ScalarField) -> ScalarField:
        self._check(rhs)
        return self._expand(self.solve_interior(rhs.values.ravel()[self.interior]))

    def perturbation_rhs(self, gamma: SymMatrixField, u: ScalarField) -> np.ndarray:
        """Interior values of the flux-form discretisation of ``div(gamma grad u)``."""
        self._check(gamma)
        self._check(u)
        Kg = assemble_stiffness(gamma)
        return -(Kg @ u.values.ravel())[self.interior]

    def solve_perturbation(self, gamma: SymMatrixField, u: ScalarField) -> ScalarField:
        """Solve ``-div(gamma0 grad v) = div(gamma grad u)``, ``v = 0`` on the boundary."""
        return self._expand(self.solve_interior(self.perturbation_rhs(gamma, u)))

    def apply(self, u: ScalarField) -> ScalarField:
        """``-div(gamma0 grad u)`` at interior nodes (zero on the boundary)."""
        self._check(u)
        r = np.zeros(self.grid.size)
        r[self.interior] = (self.K @ u.values.ravel())[self.interior]
        return ScalarField(self.grid, r.reshape(self.grid.shape))

    def symmetry_defect(self) -> float:
        """``max|A - A^T| / max|A|``."""
        d = abs(self.A - self.A.T)
        return float(d.max() / abs(self.A).max()) if d.nnz else 0.0

    def smallest_ritz_value(self) -> float:
        """Smallest eigenvalue estimate of the interior matrix (diagnostics)."""
        n = self.n_interior
        if n <= 400:
            return float(np.linalg.eigvalsh(self.A.toarray())[0])
        vals = spla.eigsh(self.A, k=1, sigma=0.0, which="LM", return_eigenvectors=False)
        return float(vals[0])


__all__ = ["EllipticOperator", "SolverError", "EllipticityError", "assemble_stiffness"]
