"""Background power densities, their linearisation, and synthetic noise.

Index convention: solutions are numbered from 0 in the API. With ``n = 2``
and ``m = n + 1`` solutions, the linearised collection holds the pairs
``(i, j)`` with ``0 <= i < n`` and ``i <= j <= n``. File names use 1-based
labels (``dH_13`` is the pair ``(0, 2)``).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .elliptic import EllipticOperator
from .fieldio import read_field, read_keyvalue, write_field, write_keyvalue
from .fields import (NDIM, Grid2D, GridError, ScalarField, SymMatrixField, grad_array,
                     hessian_array, h1_norm, l2_norm)


class MissingMeasurementError(KeyError):
    """A required power density is absent from a measurement set."""

    def __init__(self, name: str, pair: tuple[int, int]):
        self.pair = pair
        super().__init__(f"missing measurement {name}_{pair[0] + 1}{pair[1] + 1} "
                         f"(pair ({pair[0] + 1},{pair[1] + 1}))")


def lpd_pairs(n: int = NDIM) -> list[tuple[int, int]]:
    """Index pairs of the linearised collection ``{(i, j): i < n, i <= j <= n}``."""
    return [(i, j) for i in range(n) for j in range(i, n + 1)]


@dataclass(frozen=True)
class Solution:
    g: ScalarField
    u: ScalarField
    grad: np.ndarray         # (ny, nx, 2)
    hess: np.ndarray         # (ny, nx, 3) packed


@dataclass(frozen=True)
class SolutionSet:
    """Background solutions ``u_i`` of ``-div(gamma0 grad u_i) = 0`` with their derivatives."""

    op: EllipticOperator
    solutions: tuple[Solution, ...]

    @property
    def grid(self) -> Grid2D:
        return self.op.grid

    @property
    def gamma0(self) -> SymMatrixField:
        return self.op.gamma0

    @property
    def m(self) -> int:
        return len(self.solutions)

    def __len__(self):
        return self.m

    def grads(self) -> np.ndarray:
        """``(ny, nx, 2, m)``: column ``k`` is ``grad u_k``."""
        return np.stack([s.grad for s in self.solutions], axis=-1)

    def grad_u_matrix(self, n: int = NDIM) -> np.ndarray:
        """``[grad U] = [grad u_1 | ... | grad u_n]`` per node."""
        return self.grads()[..., :n]


def solve_background(op: EllipticOperator, boundary_data) -> SolutionSet:
    """Solve the background problem for each boundary datum (ScalarFields)."""
    grid = op.grid
    sols = []
    for g in boundary_data:
        u = op.solve_dirichlet(g)
        sols.append(Solution(g, u, grad_array(u.values, grid.hx, grid.hy),
                             hessian_array(u.values, grid.hx, grid.hy)))
    return SolutionSet(op, tuple(sols))


def solution_from_field(u: ScalarField) -> Solution:
    g = u.grid
    return Solution(u, u, grad_array(u.values, g.hx, g.hy), hessian_array(u.values, g.hx, g.hy))


def _quad(a: np.ndarray, gamma: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...ij,...j->...", a, gamma, b)


def power_density(sset: SolutionSet, i: int, j: int) -> ScalarField:
    """``H_ij = grad u_i . gamma0 grad u_j``."""
    if not (0 <= i < sset.m and 0 <= j < sset.m):
        raise IndexError(f"solution index out of range: ({i}, {j}) with m = {sset.m}")
    g0 = sset.gamma0.matrices()
    a, b = sset.solutions[i].grad, sset.solutions[j].grad
    val = 0.5 * (_quad(a, g0, b) + _quad(b, g0, a))
    return ScalarField(sset.grid, val)


def linearized_power_density(sset: SolutionSet, gamma: SymMatrixField, v, i: int, j: int) -> ScalarField:
    """``dH_ij = grad u_i . gamma grad u_j + grad u_i . gamma0 grad v_j + grad u_j . gamma0 grad v_i``.

    ``v`` is the list of perturbation solutions (ScalarFields) for ``gamma``.
    """
    grid = sset.grid
    if gamma.grid != grid or any(vk.grid != grid for vk in v):
        raise GridError("gamma / v grids do not match the solution set")
    g0 = sset.gamma0.matrices()
    gm = gamma.matrices()
    gui, guj = sset.solutions[i].grad, sset.solutions[j].grad
    gvi = grad_array(v[i].values, grid.hx, grid.hy)
    gvj = grad_array(v[j].values, grid.hx, grid.hy)
    val = (0.5 * (_quad(gui, gm, guj) + _quad(guj, gm, gui))
           + _quad(gui, g0, gvj) + _quad(guj, g0, gvi))
    return ScalarField(grid, val)


@dataclass(frozen=True)
class MeasurementSet:
    """Power densities ``H`` (all pairs ``i <= j < m``) and linearised ``dH`` (lpd pairs)."""

    grid: Grid2D
    H: dict
    dH: dict
    provenance: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return 1 + max(j for _, j in self.H)

    def get_H(self, i: int, j: int) -> ScalarField:
        key = (min(i, j), max(i, j))
        if key not in self.H:
            raise MissingMeasurementError("H", key)
        return self.H[key]

    def get_dH(self, i: int, j: int) -> ScalarField:
        key = (min(i, j), max(i, j))
        if key not in self.dH:
            raise MissingMeasurementError("dH", key)
        return self.dH[key]

    def H_matrix(self, k: int = NDIM) -> np.ndarray:
        """``(ny, nx, k, k)`` matrix of ``H_ij`` for ``i, j < k``."""
        out = np.empty(self.grid.shape + (k, k))
        for i in range(k):
            for j in range(k):
                out[..., i, j] = self.get_H(i, j).values
        return out

    def dH_matrix(self, k: int = NDIM) -> np.ndarray:
        out = np.empty(self.grid.shape + (k, k))
        for i in range(k):
            for j in range(k):
                out[..., i, j] = self.get_dH(i, j).values
        return out

    def with_dH(self, dH: dict, **provenance) -> "MeasurementSet":
        prov = dict(self.provenance)
        prov.update(provenance)
        return MeasurementSet(self.grid, self.H, dH, prov)

    def dH_h1_norm(self) -> float:
        """Sum of the H1 norms of the stored ``dH_ij``."""
        return float(sum(h1_norm(f.values, self.grid) for f in self.dH.values()))


def measure(sset: SolutionSet, gamma: SymMatrixField | None = None, v=None,
            pairs=None, provenance: dict | None = None) -> MeasurementSet:
    """Assemble a MeasurementSet from background solutions and, optionally, a perturbation."""
    m = sset.m
    H = {(i, j): power_density(sset, i, j) for i in range(m) for j in range(i, m)}
    pairs = lpd_pairs(m - 1) if pairs is None else pairs
    dH = {}
    if gamma is not None:
        for i, j in pairs:
            dH[(i, j)] = linearized_power_density(sset, gamma, v, i, j)
    return MeasurementSet(sset.grid, H, dH, dict(provenance or {}))


def perturbation_solutions(sset: SolutionSet, gamma: SymMatrixField) -> list[ScalarField]:
    """``v_i`` solving ``-div(gamma0 grad v_i) = div(gamma grad u_i)``, ``v_i = 0`` on the boundary."""
    op = sset.op
    rhs = np.stack([op.perturbation_rhs(gamma, s.u) for s in sset.solutions], axis=-1)
    x = op.solve_interior(rhs)
    return [op._expand(x[:, k]) for k in range(sset.m)]


def synthesize(sset: SolutionSet, gamma: SymMatrixField, provenance: dict | None = None):
    """Return ``(MeasurementSet, v)`` for the perturbation ``gamma``."""
    v = perturbation_solutions(sset, gamma)
    return measure(sset, gamma, v, provenance=provenance), v


def nonlinear_power_densities(gamma_total: SymMatrixField, boundary_data, pairs,
                              method: str = "direct") -> dict:
    """``H_ij(gamma_total)`` from fresh solves with the full conductivity."""
    op = EllipticOperator(gamma_total, method=method)
    grid = op.grid
    grads = [grad_array(op.solve_dirichlet(g).values, grid.hx, grid.hy) for g in boundary_data]
    gm = gamma_total.matrices()
    return {(i, j): 0.5 * (_quad(grads[i], gm, grads[j]) + _quad(grads[j], gm, grads[i]))
            for i, j in pairs}


def frechet_errors(sset: SolutionSet, gamma: SymMatrixField, epsilons, mset: MeasurementSet | None = None):
    """``||(H(gamma0 + eps gamma) - H(gamma0)) / eps - dH(gamma)||_L2`` summed over lpd pairs."""
    if mset is None:
        mset, _ = synthesize(sset, gamma)
    pairs = sorted(mset.dH)
    boundary = [s.g for s in sset.solutions]
    grid = sset.grid
    errs = []
    for eps in epsilons:
        total = SymMatrixField(grid, sset.gamma0.values + eps * gamma.values)
        He = nonlinear_power_densities(total, boundary, pairs, method=sset.op.method)
        sq = 0.0
        for p in pairs:
            q = (He[p] - mset.H[p].values) / eps - mset.dH[p].values
            sq += l2_norm(q, grid) ** 2
        errs.append(float(np.sqrt(sq)))
    return np.array(errs)


# --------------------------------------------------------------------------
# periodic (torus) variant
# --------------------------------------------------------------------------

def periodic_wavenumbers(grid: Grid2D) -> np.ndarray:
    """Angular wavenumbers ``(ny-1, nx-1, 2)`` of the period cell; Nyquist modes set to 0."""
    nx, ny = grid.nx - 1, grid.ny - 1
    kx = 2 * np.pi * np.fft.fftfreq(nx, d=grid.hx)
    ky = 2 * np.pi * np.fft.fftfreq(ny, d=grid.hy)
    if nx % 2 == 0:
        kx[nx // 2] = 0.0
    if ny % 2 == 0:
        ky[ny // 2] = 0.0
    KX, KY = np.meshgrid(kx, ky)
    return np.stack([KX, KY], axis=-1)


def _wrap(cell: np.ndarray) -> np.ndarray:
    """Extend period-cell values to the closed grid by periodic copy."""
    out = np.concatenate([cell, cell[:1]], axis=0)
    return np.concatenate([out, out[:, :1]], axis=1)


def periodic_linearized_power_densities(gamma0: np.ndarray, grads: np.ndarray, gamma: SymMatrixField,
                                        pairs) -> dict:
    """``dH_ij`` for a constant background on the torus, with spectral perturbation solves.

    The rectangle of ``gamma.grid`` is treated as one period. Only the
    gradients ``grads`` (``(ny, nx, 2, m)``) of the background solutions
    enter, so they need not be periodic themselves, but ``gamma`` must
    vanish on the boundary so that ``gamma grad u_j`` is periodic.
    """
    grid = gamma.grid
    g0 = np.asarray(gamma0, dtype=float)
    if not np.all(gamma.values[grid.boundary_mask()] == 0):
        raise ValueError("periodic variant needs gamma to vanish on the boundary")
    cell = (slice(0, grid.ny - 1), slice(0, grid.nx - 1))
    gm = gamma.matrices()[cell]
    gu = grads[cell]
    xi = periodic_wavenumbers(grid)
    l2 = np.einsum("...i,ij,...j->...", xi, g0, xi)
    l2[l2 == 0] = np.inf
    gradv = []
    for j in range(gu.shape[-1]):
        w_hat = np.fft.fft2(np.einsum("...ab,...b->...a", gm, gu[..., j]), axes=(0, 1))
        v_hat = 1j * np.einsum("...a,...a->...", xi, w_hat) / l2
        gradv.append(np.real(np.fft.ifft2(1j * xi * v_hat[..., None], axes=(0, 1))))
    out = {}
    for i, j in pairs:
        a, b = gu[..., i], gu[..., j]
        val = (0.5 * (_quad(a, gm, b) + _quad(b, gm, a))
               + np.einsum("...a,ab,...b->...", a, g0, gradv[j])
               + np.einsum("...a,ab,...b->...", b, g0, gradv[i]))
        out[(i, j)] = ScalarField(grid, _wrap(val))
    return out


# --------------------------------------------------------------------------
# noise
# --------------------------------------------------------------------------

def smooth_noise(grid: Grid2D, amplitude: float, rng: np.random.Generator,
                 cutoff: float = 0.25) -> np.ndarray:
    """Low-pass filtered white noise with discrete H1 norm equal to ``amplitude``.

    Frequencies above ``cutoff`` times the Nyquist frequency (radially) are removed.
    """
    w = rng.standard_normal(grid.shape)
    fy = np.fft.fftfreq(grid.ny)[:, None] / 0.5
    fx = np.fft.fftfreq(grid.nx)[None, :] / 0.5
    keep = np.hypot(fx, fy) <= cutoff
    keep[0, 0] = True
    s = np.real(np.fft.ifft2(np.fft.fft2(w) * keep))
    norm = h1_norm(s, grid)
    if amplitude == 0.0 or norm == 0.0:
        return np.zeros(grid.shape)
    return s * (amplitude / norm)


def add_noise(mset: MeasurementSet, amplitude: float, seed: int) -> MeasurementSet:
    """Add smooth noise of H1 norm ``amplitude`` to every stored ``dH_ij``.

    The stream for pair ``(i, j)`` is seeded from ``(seed, i, j)``, so the
    result does not depend on iteration order.
    """
    if amplitude < 0:
        raise ValueError("noise amplitude must be non-negative")
    if amplitude == 0:
        return mset
    dH = {}
    for (i, j), f in mset.dH.items():
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i, j]))
        dH[(i, j)] = ScalarField(mset.grid, f.values + smooth_noise(mset.grid, amplitude, rng))
    return mset.with_dH(dH, noise_amplitude=float(amplitude), noise_seed=int(seed),
                        noise_model="lowpass-white-h1")


# --------------------------------------------------------------------------
# directory serialisation
# --------------------------------------------------------------------------

def _label(name, i, j):
    return f"{name}_{i + 1}{j + 1}"


def save_measurements(mset: MeasurementSet, path) -> None:
    os.makedirs(path, exist_ok=True)
    for (i, j), f in sorted(mset.H.items()):
        write_field(f, os.path.join(path, _label("H", i, j) + ".pdf1"))
    for (i, j), f in sorted(mset.dH.items()):
        write_field(f, os.path.join(path, _label("dH", i, j) + ".pdf1"))
    manifest = {"format": "pdrkit-measurements-1", "m": mset.m,
                "H_pairs": [_label("H", i, j) for i, j in sorted(mset.H)],
                "dH_pairs": [_label("dH", i, j) for i, j in sorted(mset.dH)]}
    manifest.update({f"provenance.{k}": v for k, v in mset.provenance.items()})
    write_keyvalue(os.path.join(path, "manifest.txt"), manifest)


def _parse_label(label: str) -> tuple[int, int]:
    digits = label.split("_", 1)[1]
    return int(digits[0]) - 1, int(digits[1]) - 1


def load_measurements(path, required_dH=None) -> MeasurementSet:
    """Read a measurement directory written by :func:`save_measurements`."""
    man = read_keyvalue(os.path.join(path, "manifest.txt"))
    H, dH = {}, {}
    grid = None
    for kind, store in (("H", H), ("dH", dH)):
        labels = [s.strip() for s in man.get(f"{kind}_pairs", "").split(",") if s.strip()]
        pairs = [_parse_label(s) for s in labels]
        if kind == "dH" and required_dH is not None:
            pairs = sorted(set(pairs) | set(required_dH))
        for pair in pairs:
            fname = os.path.join(path, _label(kind, *pair) + ".pdf1")
            if not os.path.exists(fname):
                raise MissingMeasurementError(kind, pair)
            f = read_field(fname)
            if grid is None:
                grid = f.grid
            elif f.grid != grid:
                raise GridError(f"{fname}: grid differs from other measurements")
            store[pair] = f
    prov = {k.split(".", 1)[1]: v for k, v in man.items() if k.startswith("provenance.")}
    return MeasurementSet(grid, H, dH, prov)
