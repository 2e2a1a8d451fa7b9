"""Scenario configuration: an INI-style file with a fixed schema.

Physics inputs have no defaults; numeric tolerances do. Schema::

    [grid]
    cells = 128                     # cells per axis (nodes = cells + 1); or cells_x / cells_y
    extent = 0, 0, 1, 1             # x0, y0, x1, y1

    [background]
    kind = constant                 # constant | diagonal-polynomial | file
    matrix = 1, 0, 1                # constant: a11, a12, a22
    # diagonal-polynomial: gamma0 = diag(p1, p2), p = c00 + c10 x + c01 y + c20 x^2 + c11 x y + c02 y^2
    # diag1 = 1, 0, 0, 0.5, 0, 0
    # diag2 = 1, 0, 0, 0, 0, 0
    # file: path = gamma0.pdf1

    [boundary]
    kind = coordinates-quadratic    # g = (x, y, 1/2 q_ij x_i x_j) | file
    q = 1, 0, -1                    # q11, q12, q22
    # file: paths = g1.pdf1, g2.pdf1, g3.pdf1

    [perturbation]
    kind = bump                     # bump | zero | file
    center = 0.5, 0.5
    radius = 0.2                    # half-width of the square support
    power = 4                       # profile (1 - t^2)^power per axis
    matrix = 1, 0.5, 2              # tensor multiplying the profile
    # file: path = gamma.pdf1

    [thresholds]                    # defaults 1e-6
    c0 = 1e-6
    sigma_min = 1e-6

    [solver]                        # defaults: direct, 1e-10, false
    method = direct
    tol = 1e-10
    diagnostics = false

    [noise]                         # default 0: amplitude relative to the H1 norm of dH
    relative_amplitude = 0

    [run]
    seed = 0                        # default 0

    [sweep]                         # defaults as shown
    resolutions = 32, 64, 128
    epsilons = 1e-1, 1e-2, 1e-3
    noise_levels = 1e-4, 1e-3, 1e-2

    [checks]                        # optional pass/fail thresholds
    rel_l2_gamma_max = 0.05
    rel_h1_trace_max = 0.05
    min_order = 1.5
    slope_tolerance = 0.1
    min_r2 = 0.95

    [symbols]                       # defaults as shown
    samples = 1000
    composition_samples = 50
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .fieldio import read_field
from .fields import Grid2D, ScalarField, SymMatrixField

# numeric defaults (documented above); physics sections have none
DEFAULTS = {
    ("thresholds", "c0"): 1e-6,
    ("thresholds", "sigma_min"): 1e-6,
    ("solver", "method"): "direct",
    ("solver", "tol"): 1e-10,
    ("solver", "diagnostics"): False,
    ("noise", "relative_amplitude"): 0.0,
    ("run", "seed"): 0,
    ("sweep", "resolutions"): (32, 64, 128),
    ("sweep", "epsilons"): (1e-1, 1e-2, 1e-3),
    ("sweep", "noise_levels"): (1e-4, 1e-3, 1e-2),
    ("checks", "min_order"): 1.5,
    ("checks", "slope_tolerance"): 0.1,
    ("checks", "min_r2"): 0.95,
    ("symbols", "samples"): 1000,
    ("symbols", "composition_samples"): 50,
}

REQUIRED_SECTIONS = ("grid", "background", "boundary", "perturbation")

SCHEMA = {
    "grid": {"cells", "cells_x", "cells_y", "extent"},
    "background": {"kind", "matrix", "diag1", "diag2", "path"},
    "boundary": {"kind", "q", "paths"},
    "perturbation": {"kind", "center", "radius", "power", "matrix", "path"},
    "thresholds": {"c0", "sigma_min"},
    "solver": {"method", "tol", "diagnostics"},
    "noise": {"relative_amplitude"},
    "run": {"seed"},
    "sweep": {"resolutions", "epsilons", "noise_levels"},
    "checks": {"rel_l2_gamma_max", "rel_h1_trace_max", "min_order", "slope_tolerance", "min_r2"},
    "symbols": {"samples", "composition_samples"},
}


class ConfigError(ValueError):
    """Missing or malformed configuration entry."""


def _floats(text: str, count: int | None, where: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(s) for s in text.replace(";", ",").split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: expected numbers, got {text!r}") from exc
    if count is not None and len(vals) != count:
        raise ConfigError(f"{where}: expected {count} values, got {len(vals)}")
    return vals


# --------------------------------------------------------------------------
# analytic background tensors
# --------------------------------------------------------------------------

def _poly2(c):
    c00, c10, c01, c20, c11, c02 = c

    def val(x, y):
        return c00 + c10 * x + c01 * y + c20 * x * x + c11 * x * y + c02 * y * y

    def grad(x, y):
        return np.array([c10 + 2 * c20 * x + c11 * y, c01 + c11 * x + 2 * c02 * y])

    hess = np.array([[2 * c20, c11], [c11, 2 * c02]])
    return val, grad, hess


@dataclass(frozen=True)
class AnalyticTensor:
    """Pointwise ``gamma0(x)`` with exact first and second derivatives."""

    value: Callable
    gradient: Callable          # (2, 2, 2): [k] = d_k gamma0
    hessian: Callable           # (2, 2, 2, 2): [l, k] = d_l d_k gamma0

    def on_grid(self, grid: Grid2D) -> SymMatrixField:
        X, Y = grid.meshgrid()
        mats = np.empty(grid.shape + (2, 2))
        for j in range(grid.ny):
            for i in range(grid.nx):
                mats[j, i] = self.value(np.array([X[j, i], Y[j, i]]))
        return SymMatrixField.from_matrices(grid, mats)


def constant_tensor(a11: float, a12: float, a22: float) -> AnalyticTensor:
    m = np.array([[a11, a12], [a12, a22]])
    return AnalyticTensor(lambda x: m.copy(), lambda x: np.zeros((2, 2, 2)), lambda x: np.zeros((2, 2, 2, 2)))


def diagonal_polynomial_tensor(diag1, diag2) -> AnalyticTensor:
    """``diag(p1, p2)`` with quadratic polynomials given by 6 coefficients each."""
    p = [_poly2(diag1), _poly2(diag2)]

    def value(x):
        return np.diag([p[0][0](*x), p[1][0](*x)])

    def gradient(x):
        out = np.zeros((2, 2, 2))
        for a in range(2):
            out[:, a, a] = p[a][1](*x)
        return out

    def hessian(x):
        out = np.zeros((2, 2, 2, 2))
        for a in range(2):
            out[:, :, a, a] = p[a][2]
        return out

    return AnalyticTensor(value, gradient, hessian)


# --------------------------------------------------------------------------
# config types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BackgroundSpec:
    kind: str
    matrix: tuple = ()
    diag1: tuple = ()
    diag2: tuple = ()
    path: str = ""

    def analytic(self) -> AnalyticTensor | None:
        if self.kind == "constant":
            return constant_tensor(*self.matrix)
        if self.kind == "diagonal-polynomial":
            return diagonal_polynomial_tensor(self.diag1, self.diag2)
        return None


@dataclass(frozen=True)
class BoundarySpec:
    kind: str
    q: tuple = ()
    paths: tuple = ()


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    center: tuple = ()
    radius: float = 0.0
    power: int = 0
    matrix: tuple = ()
    path: str = ""


@dataclass(frozen=True)
class ScenarioConfig:
    cells: tuple[int, int]
    extent: tuple[float, float, float, float]
    background: BackgroundSpec
    boundary: BoundarySpec
    perturbation: PerturbationSpec
    c0: float = DEFAULTS[("thresholds", "c0")]
    sigma_min: float = DEFAULTS[("thresholds", "sigma_min")]
    method: str = DEFAULTS[("solver", "method")]
    tol: float = DEFAULTS[("solver", "tol")]
    diagnostics: bool = DEFAULTS[("solver", "diagnostics")]
    noise: float = DEFAULTS[("noise", "relative_amplitude")]
    seed: int = DEFAULTS[("run", "seed")]
    resolutions: tuple = DEFAULTS[("sweep", "resolutions")]
    epsilons: tuple = DEFAULTS[("sweep", "epsilons")]
    noise_levels: tuple = DEFAULTS[("sweep", "noise_levels")]
    checks: dict = field(default_factory=dict)
    symbol_samples: int = DEFAULTS[("symbols", "samples")]
    composition_samples: int = DEFAULTS[("symbols", "composition_samples")]
    base_dir: str = "."

    def grid(self, cells: int | None = None) -> Grid2D:
        cx, cy = (cells, cells) if cells is not None else self.cells
        x0, y0, x1, y1 = self.extent
        return Grid2D(cx + 1, cy + 1, x0, y0, x1 - x0, y1 - y0)

    def check(self, key: str):
        if key in self.checks:
            return self.checks[key]
        return DEFAULTS.get(("checks", key))

    def with_cells(self, cells: int) -> "ScenarioConfig":
        return replace(self, cells=(cells, cells))

    def _path(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    # ---- field construction -------------------------------------------

    def gamma0_field(self, grid: Grid2D) -> SymMatrixField:
        an = self.background.analytic()
        if an is not None:
            return an.on_grid(grid)
        f = read_field(self._path(self.background.path))
        if not isinstance(f, SymMatrixField) or f.grid != grid:
            raise ConfigError("background file must be a symmat field on the configured grid")
        return f

    def boundary_fields(self, grid: Grid2D) -> list[ScalarField]:
        X, Y = grid.meshgrid()
        b = self.boundary
        if b.kind == "coordinates-quadratic":
            q11, q12, q22 = b.q
            u3 = 0.5 * (q11 * X * X + 2 * q12 * X * Y + q22 * Y * Y)
            return [ScalarField(grid, X), ScalarField(grid, Y), ScalarField(grid, u3)]
        out = []
        for p in b.paths:
            f = read_field(self._path(p))
            if not isinstance(f, ScalarField) or f.grid != grid:
                raise ConfigError(f"boundary file {p} must be a scalar field on the configured grid")
            out.append(f)
        return out

    def gamma_field(self, grid: Grid2D) -> SymMatrixField:
        p = self.perturbation
        if p.kind == "zero":
            return SymMatrixField.zeros(grid)
        if p.kind == "bump":
            X, Y = grid.meshgrid()
            prof = bump_profile(X, Y, p.center, p.radius, p.power)
            return SymMatrixField(grid, prof[..., None] * np.asarray(p.matrix))
        f = read_field(self._path(p.path))
        if not isinstance(f, SymMatrixField) or f.grid != grid:
            raise ConfigError("perturbation file must be a symmat field on the configured grid")
        return f

    @property
    def file_based(self) -> bool:
        return "file" in (self.background.kind, self.boundary.kind, self.perturbation.kind)


def bump_profile(X, Y, center, radius, power) -> np.ndarray:
    """``(1 - s^2)^power (1 - t^2)^power`` on the square of half-width ``radius``, else 0."""
    s = ((X - center[0]) / radius) ** 2
    t = ((Y - center[1]) / radius) ** 2
    return np.where((s < 1) & (t < 1), (1 - s) ** power * (1 - t) ** power, 0.0)


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

def _get(cp, section, key, conv, required=True):
    if cp.has_option(section, key):
        raw = cp.get(section, key)
        try:
            return conv(raw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc
    if (section, key) in DEFAULTS:
        return DEFAULTS[(section, key)]
    if required:
        raise ConfigError(f"[{section}] {key} is required")
    return None


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def parse_config(text: str, base_dir: str = ".") -> ScenarioConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    for s in REQUIRED_SECTIONS:
        if not cp.has_section(s):
            raise ConfigError(f"section [{s}] is required")
    for s in cp.sections():
        if s not in SCHEMA:
            raise ConfigError(f"unknown section [{s}]")
        unknown = sorted(set(cp.options(s)) - SCHEMA[s])
        if unknown:
            raise ConfigError(f"[{s}] unknown key(s): {', '.join(unknown)}")

    if cp.has_option("grid", "cells"):
        n = _get(cp, "grid", "cells", int)
        cells = (n, n)
    else:
        cells = (_get(cp, "grid", "cells_x", int), _get(cp, "grid", "cells_y", int))
    if min(cells) < 2:
        raise ConfigError("[grid] needs at least 2 cells per axis")
    extent = _floats(_get(cp, "grid", "extent", str), 4, "[grid] extent")
    if extent[2] <= extent[0] or extent[3] <= extent[1]:
        raise ConfigError("[grid] extent must satisfy x1 > x0 and y1 > y0")

    kind = _get(cp, "background", "kind", str).strip()
    if kind == "constant":
        bg = BackgroundSpec(kind, matrix=_floats(_get(cp, "background", "matrix", str), 3, "[background] matrix"))
    elif kind == "diagonal-polynomial":
        bg = BackgroundSpec(kind, diag1=_floats(_get(cp, "background", "diag1", str), 6, "[background] diag1"),
                            diag2=_floats(_get(cp, "background", "diag2", str), 6, "[background] diag2"))
    elif kind == "file":
        bg = BackgroundSpec(kind, path=_get(cp, "background", "path", str).strip())
    else:
        raise ConfigError(f"[background] unknown kind {kind!r}")

    kind = _get(cp, "boundary", "kind", str).strip()
    if kind == "coordinates-quadratic":
        bd = BoundarySpec(kind, q=_floats(_get(cp, "boundary", "q", str), 3, "[boundary] q"))
    elif kind == "file":
        paths = tuple(s.strip() for s in _get(cp, "boundary", "paths", str).split(",") if s.strip())
        if len(paths) != 3:
            raise ConfigError("[boundary] paths needs three files")
        bd = BoundarySpec(kind, paths=paths)
    else:
        raise ConfigError(f"[boundary] unknown kind {kind!r}")

    kind = _get(cp, "perturbation", "kind", str).strip()
    if kind == "bump":
        power = _get(cp, "perturbation", "power", int)
        radius = _get(cp, "perturbation", "radius", float)
        if power < 1 or radius <= 0:
            raise ConfigError("[perturbation] bump needs power >= 1 and radius > 0")
        pt = PerturbationSpec(kind, center=_floats(_get(cp, "perturbation", "center", str), 2,
                                                   "[perturbation] center"),
                              radius=radius, power=power,
                              matrix=_floats(_get(cp, "perturbation", "matrix", str), 3, "[perturbation] matrix"))
    elif kind == "zero":
        pt = PerturbationSpec(kind)
    elif kind == "file":
        pt = PerturbationSpec(kind, path=_get(cp, "perturbation", "path", str).strip())
    else:
        raise ConfigError(f"[perturbation] unknown kind {kind!r}")

    method = _get(cp, "solver", "method", str).strip()
    if method not in ("direct", "cg"):
        raise ConfigError(f"[solver] method must be direct or cg, got {method!r}")
    checks = {}
    if cp.has_section("checks"):
        for key in cp.options("checks"):
            checks[key] = _get(cp, "checks", key, float)
    ints = lambda t: tuple(int(v) for v in _floats(t, None, "[sweep]"))  # noqa: E731
    floats = lambda t: _floats(t, None, "[sweep]")  # noqa: E731
    cfg = ScenarioConfig(
        cells=cells, extent=extent, background=bg, boundary=bd, perturbation=pt,
        c0=_get(cp, "thresholds", "c0", float),
        sigma_min=_get(cp, "thresholds", "sigma_min", float),
        method=method,
        tol=_get(cp, "solver", "tol", float),
        diagnostics=_get(cp, "solver", "diagnostics", _bool),
        noise=_get(cp, "noise", "relative_amplitude", float),
        seed=_get(cp, "run", "seed", int),
        resolutions=_get(cp, "sweep", "resolutions", ints),
        epsilons=_get(cp, "sweep", "epsilons", floats),
        noise_levels=_get(cp, "sweep", "noise_levels", floats),
        checks=checks,
        symbol_samples=_get(cp, "symbols", "samples", int),
        composition_samples=_get(cp, "symbols", "composition_samples", int),
        base_dir=base_dir,
    )
    if cfg.noise < 0:
        raise ConfigError("[noise] relative_amplitude must be non-negative")
    return cfg


def load_config(path) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {os.fspath(path)!r}: {exc}") from exc
    return parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)))


SQ1_BUMP = """\
[grid]
cells = {cells}
extent = 0, 0, 1, 1

[background]
kind = constant
matrix = 1, 0, 1

[boundary]
kind = coordinates-quadratic
q = 1, 0, -1

[perturbation]
kind = bump
center = 0.5, 0.5
radius = 0.2
power = 4
matrix = 1, 0.5, 2
"""


def sq1_bump(cells: int = 64) -> ScenarioConfig:
    """Identity background, data ``(x, y, (x^2 - y^2)/2)``, smooth interior bump."""
    return parse_config(SQ1_BUMP.format(cells=cells))
