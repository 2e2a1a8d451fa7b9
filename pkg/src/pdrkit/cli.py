"""Batch driver: ``pdrkit <command> [options]``.

Commands
--------
synthesize        solve the background, synthesise H and dH, write a measurement directory
reconstruct       rebuild gamma from a measurement directory and write a results directory
check-hypotheses  evaluate the determinant and Z-rank conditions
sweep             resolution, noise or epsilon study as a column table
symbols-verify    randomised report of the pointwise symbol identities

Exit codes: 0 all checks passed, 1 a check failed, 2 configuration or usage
error, 3 bad or missing input data, 4 numerical failure in the pipeline.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .elliptic import EllipticOperator, SolverError
from .fieldio import FieldFormatError, format_value, read_field, write_field, write_keyvalue, write_mask
from .fields import EllipticityError, GridError, ScalarField, h1_norm, relative_trace, sym_l2_norm
from .frames import compute_frames
from .invert import ReconstructionConfig, ReconstructionError, reconstruct, relative_errors
from .measure import (MissingMeasurementError, add_noise, frechet_errors, load_measurements, lpd_pairs,
                      save_measurements, solve_background, synthesize)
from .scenarios import ConfigError, ScenarioConfig, load_config

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def worker_count() -> int:
    raw = os.environ.get("PDRKIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise CliError(f"PDRKIT_THREADS must be a positive integer, got {raw!r}", EXIT_CONFIG) from exc
    if n < 1:
        raise CliError(f"PDRKIT_THREADS must be a positive integer, got {raw!r}", EXIT_CONFIG)
    return n


def parse_subdomain(text: str | None):
    if text is None:
        return None
    try:
        vals = tuple(float(s) for s in text.split(","))
    except ValueError as exc:
        raise CliError(f"--subdomain expects x0,y0,x1,y1, got {text!r}", EXIT_CONFIG) from exc
    if len(vals) != 4 or vals[2] <= vals[0] or vals[3] <= vals[1]:
        raise CliError(f"--subdomain expects x0,y0,x1,y1 with x1 > x0 and y1 > y0, got {text!r}", EXIT_CONFIG)
    return vals


def region_mask(grid, subdomain):
    return np.ones(grid.shape, dtype=bool) if subdomain is None else grid.box_mask(*subdomain)


def build_background(cfg: ScenarioConfig, cells: int | None = None):
    grid = cfg.grid(cells)
    op = EllipticOperator(cfg.gamma0_field(grid), method=cfg.method, tol=cfg.tol)
    return solve_background(op, cfg.boundary_fields(grid))


def provenance(cfg: ScenarioConfig, grid) -> dict:
    b, p = cfg.background, cfg.perturbation
    g0_id = {"constant": f"constant({format_value(b.matrix)})",
             "diagonal-polynomial": f"diagonal-polynomial({format_value(b.diag1)}; {format_value(b.diag2)})",
             "file": f"file({b.path})"}[b.kind]
    g_id = {"bump": f"bump(center={format_value(p.center)}; radius={p.radius!r}; power={p.power}; "
                    f"matrix={format_value(p.matrix)})",
            "zero": "zero", "file": f"file({p.path})"}[p.kind]
    return {"gamma0": g0_id, "gamma": g_id,
            "grid": f"{grid.nx}x{grid.ny} [{grid.x0!r}, {grid.x0 + grid.Lx!r}] x [{grid.y0!r}, {grid.y0 + grid.Ly!r}]",
            "noise": "none"}


def hypothesis_lines(frames, region) -> list[str]:
    return [frames.det_report.summary(region), frames.Z_report.summary(region)]


def hypotheses_pass(frames, region) -> bool:
    return frames.det_report.satisfied_on(region) and frames.Z_report.satisfied_on(region)


def write_hypotheses(out, frames, region, grid):
    with open(os.path.join(out, "hypotheses.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(hypothesis_lines(frames, region)) + "\n")
    write_mask(frames.det_report.mask, grid, os.path.join(out, "mask_det.pdf1"))
    write_mask(frames.Z_report.mask, grid, os.path.join(out, "mask_Z.pdf1"))
    write_mask(region, grid, os.path.join(out, "mask_region.pdf1"))


def fit_loglog(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def linear_fit(x, y):
    """Least-squares line ``y = slope x + intercept`` with its coefficient of determination."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def write_table(path, header: list[str], rows, comments=()):
    with open(path, "w", encoding="utf-8") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write("# " + " ".join(f"{h:>16}" for h in header) + "\n")
        for r in rows:
            fh.write("  " + " ".join(f"{v:>16.8e}" if isinstance(v, float) else f"{v:>16}" for v in r) + "\n")


def _print_table(header, rows):
    print("# " + " ".join(f"{h:>16}" for h in header))
    for r in rows:
        print("  " + " ".join(f"{v:>16.8e}" if isinstance(v, float) else f"{v:>16}" for v in r))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synthesize(cfg: ScenarioConfig, out: str, force: bool = False, subdomain=None) -> int:
    sset = build_background(cfg)
    grid = sset.grid
    region = region_mask(grid, subdomain)
    frames = compute_frames(sset, cfg.c0, cfg.sigma_min)
    ok = hypotheses_pass(frames, region)
    for line in hypothesis_lines(frames, region):
        print(line)
    if not ok and not force:
        print("hypotheses fail on the evaluation region; rerun with --force to synthesise anyway")
        return EXIT_CHECK
    gamma = cfg.gamma_field(grid)
    prov = provenance(cfg, grid)
    mset, _ = synthesize(sset, gamma, prov)
    if cfg.noise > 0:
        mset = add_noise(mset, cfg.noise * mset.dH_h1_norm(), cfg.seed)
        prov = dict(mset.provenance, noise=f"lowpass-white-h1(relative={cfg.noise!r}; seed={cfg.seed})")
        mset = replace(mset, provenance=prov)
    os.makedirs(out, exist_ok=True)
    save_measurements(mset, out)
    write_field(sset.gamma0, os.path.join(out, "gamma0.pdf1"))
    write_field(gamma, os.path.join(out, "gamma_true.pdf1"))
    for k, s in enumerate(sset.solutions):
        write_field(s.u, os.path.join(out, f"u_{k + 1}.pdf1"))
    write_hypotheses(out, frames, region, grid)
    print(f"wrote {len(mset.H)} H fields and {len(mset.dH)} dH fields to {out}")
    return EXIT_OK


def run_reconstruction(cfg: ScenarioConfig, sset, mset, gamma_true, force: bool, subdomain):
    rc = ReconstructionConfig(cfg.c0, cfg.sigma_min, subdomain, force, cfg.diagnostics)
    result = reconstruct(sset, mset, rc)
    grid = sset.grid
    metrics = {"grid_nx": grid.nx, "grid_ny": grid.ny, "forced": force,
               "subdomain": "none" if subdomain is None else format_value(subdomain),
               "hypotheses_pass": hypotheses_pass(result.frames, result.region)}
    metrics.update({k: ("none" if v is None else v) for k, v in result.diagnostics.items()})
    if gamma_true is not None:
        metrics.update(relative_errors(result, gamma_true, sset.gamma0, result.region))
    return result, metrics


def reconstruction_checks(cfg: ScenarioConfig, metrics: dict) -> list[tuple[str, bool]]:
    checks = [("trace_consistency <= 1e-12", metrics["trace_consistency"] <= 1e-12)]
    if not metrics["forced"]:
        checks.append(("hypotheses", bool(metrics["hypotheses_pass"])))
    for key in ("rel_l2_gamma", "rel_h1_trace"):
        bound = cfg.check(f"{key}_max")
        if bound is not None and key in metrics:
            checks.append((f"{key} <= {bound!r}", metrics[key] <= bound))
    return checks


def cmd_reconstruct(cfg: ScenarioConfig, measurements: str, out: str, force: bool = False, subdomain=None) -> int:
    mset = load_measurements(measurements, required_dH=lpd_pairs(2))
    sset = build_background(cfg)
    if mset.grid != sset.grid:
        raise CliError("measurement grid does not match the configured grid", EXIT_DATA)
    truth_path = os.path.join(measurements, "gamma_true.pdf1")
    gamma_true = read_field(truth_path) if os.path.exists(truth_path) else None
    result, metrics = run_reconstruction(cfg, sset, mset, gamma_true, force, subdomain)
    checks = reconstruction_checks(cfg, metrics)
    metrics["status"] = "pass" if all(ok for _, ok in checks) else "fail"
    os.makedirs(out, exist_ok=True)
    write_field(result.gamma, os.path.join(out, "gamma_rec.pdf1"))
    write_field(result.trace, os.path.join(out, "trace_rec.pdf1"))
    for k, v in enumerate(result.v):
        write_field(v, os.path.join(out, f"v_{k + 1}.pdf1"))
    write_field(ScalarField(sset.grid, result.frames.det_report.values), os.path.join(out, "det_gradU.pdf1"))
    write_field(ScalarField(sset.grid, result.frames.Z_report.values), os.path.join(out, "sigma_min_Z.pdf1"))
    write_hypotheses(out, result.frames, result.region, sset.grid)
    write_keyvalue(os.path.join(out, "metrics.txt"), metrics)
    for name, ok in checks:
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
    for k in ("rel_l2_gamma", "rel_h1_trace"):
        if k in metrics:
            print(f"{k} = {metrics[k]:.6e}")
    return EXIT_OK if metrics["status"] == "pass" else EXIT_CHECK


def cmd_check_hypotheses(cfg: ScenarioConfig, out: str | None = None, subdomain=None) -> int:
    sset = build_background(cfg)
    region = region_mask(sset.grid, subdomain)
    frames = compute_frames(sset, cfg.c0, cfg.sigma_min)
    for line in hypothesis_lines(frames, region):
        print(line)
    if out:
        os.makedirs(out, exist_ok=True)
        write_hypotheses(out, frames, region, sset.grid)
    return EXIT_OK if hypotheses_pass(frames, region) else EXIT_CHECK


# ---- sweeps -----------------------------------------------------------

def _resolution_row(cfg: ScenarioConfig, cells: int, force: bool, subdomain):
    sset = build_background(cfg, cells)
    gamma = cfg.gamma_field(sset.grid)
    mset, _ = synthesize(sset, gamma)
    _, m = run_reconstruction(cfg, sset, mset, gamma, force, subdomain)
    return [cells, 1.0 / cells, m["rel_l2_gamma"], m["rel_h1_trace"], m["trace_consistency"],
            m["gradient_equation_residual_l2"]]


def sweep_resolution(cfg: ScenarioConfig, force=False, subdomain=None):
    if cfg.file_based:
        raise CliError("resolution sweeps need analytic background, boundary and perturbation", EXIT_CONFIG)
    cells = sorted(cfg.resolutions)
    with ThreadPoolExecutor(worker_count()) as ex:
        rows = list(ex.map(lambda c: _resolution_row(cfg, c, force, subdomain), cells))
    for k, r in enumerate(rows):
        if k == 0:
            r += ["-", "-"]
        else:
            p = rows[k - 1]
            r += [float(np.log(p[2] / r[2]) / np.log(p[1] / r[1])),
                  float(np.log(p[3] / r[3]) / np.log(p[1] / r[1]))]
    header = ["cells", "h", "rel_l2_gamma", "rel_h1_trace", "trace_consist", "grad_eq_resid",
              "order_gamma", "order_trace"]
    orders_g = [r[6] for r in rows[1:]]
    orders_t = [r[7] for r in rows[1:]]
    min_order = cfg.check("min_order")
    metrics = {"fitted_order_gamma": fit_loglog([r[1] for r in rows], [r[2] for r in rows]),
               "fitted_order_trace": fit_loglog([r[1] for r in rows], [r[3] for r in rows]),
               "min_order_gamma": min(orders_g), "min_order_trace": min(orders_t),
               "required_order": min_order}
    ok = min(orders_g) >= min_order and min(orders_t) >= min_order
    return header, rows, metrics, ok


def sweep_epsilon(cfg: ScenarioConfig, force=False, subdomain=None):
    sset = build_background(cfg)
    gamma = cfg.gamma_field(sset.grid)
    eps = list(cfg.epsilons)
    errs = frechet_errors(sset, gamma, eps)
    slope = fit_loglog(eps, errs)
    rows = [[e, float(err)] for e, err in zip(eps, errs)]
    tol = cfg.check("slope_tolerance")
    metrics = {"fitted_slope": slope, "slope_tolerance": tol}
    return ["epsilon", "frechet_error_l2"], rows, metrics, abs(slope - 1.0) <= tol


def sweep_noise(cfg: ScenarioConfig, force=False, subdomain=None):
    sset = build_background(cfg)
    grid = sset.grid
    gamma = cfg.gamma_field(grid)
    mset, _ = synthesize(sset, gamma)
    norm = mset.dH_h1_norm()
    region = region_mask(grid, subdomain)
    t_true = relative_trace(gamma.matrices(), sset.gamma0.matrices())
    levels = list(cfg.noise_levels)

    def row(level):
        noisy = add_noise(mset, level * norm, cfg.seed)
        res, m = run_reconstruction(cfg, sset, noisy, gamma, force, subdomain)
        err_g = sym_l2_norm(res.gamma.values - gamma.values, grid, region)
        err_t = h1_norm(res.trace.values - t_true, grid, region)
        return [level, level * norm, err_g, err_t, m["rel_l2_gamma"], m["rel_h1_trace"], m["trace_consistency"]]

    with ThreadPoolExecutor(worker_count()) as ex:
        rows = list(ex.map(row, levels))
    amps = [r[1] for r in rows]
    sg, ig, r2g = linear_fit(amps, [r[2] for r in rows])
    st, it, r2t = linear_fit(amps, [r[3] for r in rows])
    min_r2 = cfg.check("min_r2")
    metrics = {"dH_h1_norm": norm, "lipschitz_gamma_l2": sg, "intercept_gamma_l2": ig, "r2_gamma_l2": r2g,
               "lipschitz_trace_h1": st, "intercept_trace_h1": it, "r2_trace_h1": r2t,
               "required_r2": min_r2, "noise_seed": cfg.seed}
    header = ["relative_level", "h1_amplitude", "err_l2_gamma", "err_h1_trace", "rel_l2_gamma", "rel_h1_trace",
              "trace_consist"]
    return header, rows, metrics, r2g >= min_r2 and r2t >= min_r2


SWEEPS = {"resolution": sweep_resolution, "epsilon": sweep_epsilon, "noise": sweep_noise}


def cmd_sweep(cfg: ScenarioConfig, axis: str, out: str | None = None, force=False, subdomain=None) -> int:
    header, rows, metrics, ok = SWEEPS[axis](cfg, force, subdomain)
    metrics = {"axis": axis, **metrics, "status": "pass" if ok else "fail"}
    _print_table(header, rows)
    for k, v in metrics.items():
        print(f"{k} = {format_value(v)}")
    if out:
        os.makedirs(out, exist_ok=True)
        write_table(os.path.join(out, f"sweep_{axis}.txt"), header, rows,
                    comments=[f"pdrkit sweep axis={axis}"])
        write_keyvalue(os.path.join(out, f"sweep_{axis}_metrics.txt"), metrics)
    return EXIT_OK if ok else EXIT_CHECK


def torus_oscillation_check(cells: int = 128, wavenumbers=(4, 8, 16)):
    """Symbol route against the periodic PDE route on the identity-background scenario."""
    from .fields import Grid2D, SymMatrixField
    from .microlocal import oscillation_study
    from .scenarios import bump_profile

    grid = Grid2D.unit_square(cells + 1)
    X, Y = grid.meshgrid()
    one, zero = np.ones_like(X), np.zeros_like(X)
    grads = np.stack([np.stack([one, zero], -1), np.stack([zero, one], -1), np.stack([X, -Y], -1)], -1)
    hess = np.stack([np.zeros(X.shape + (3,)), np.zeros(X.shape + (3,)),
                     np.stack([one, zero, -one], -1)], -1)
    base = SymMatrixField(grid, bump_profile(X, Y, (0.5, 0.5), 0.25, 4)[..., None] * np.array([1.0, 0.5, 2.0]))
    return oscillation_study(np.eye(2), grads, hess, base, wavenumbers, lpd_pairs(2))


def cmd_symbols_verify(cfg: ScenarioConfig | None, out: str | None = None, seed: int | None = None) -> int:
    from .microlocal import IdentityResult, verify_identities

    samples = cfg.symbol_samples if cfg else 1000
    comp = cfg.composition_samples if cfg else 50
    seed = seed if seed is not None else (cfg.seed if cfg else 0)
    results = verify_identities(samples, seed, comp)
    study = torus_oscillation_check()
    results.append(IdentityResult("torus residual decay, order 0", len(study.wavenumbers),
                                  study.order0_decay, 0.8, ">="))
    lines = [r.line() for r in results]
    for line in lines:
        print(line)
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "symbols_report.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"# seed = {seed}\n" + "\n".join(lines) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--force", action="store_true", help="run even where hypothesis masks fail")
    common.add_argument("--subdomain", help="restrict masks and errors to the box x0,y0,x1,y1")

    p = argparse.ArgumentParser(prog="pdrkit", description="Linearised power-density reconstruction toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synthesize", parents=[common], help="write a synthetic measurement directory")
    r = sub.add_parser("reconstruct", parents=[common], help="reconstruct from a measurement directory")
    r.add_argument("measurements", help="directory written by synthesize")
    sub.add_parser("check-hypotheses", parents=[common], help="report the hypothesis masks")
    s = sub.add_parser("sweep", parents=[common], help="resolution, noise or epsilon study")
    s.add_argument("--axis", required=True, choices=sorted(SWEEPS))
    sub.add_parser("symbols-verify", parents=[common], help="randomised symbol identity report")
    return p


def _load(args, required=True) -> ScenarioConfig | None:
    if args.config is None:
        if required:
            raise CliError(f"{args.command} requires --config", EXIT_CONFIG)
        return None
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        sub = parse_subdomain(args.subdomain)
        if args.command == "synthesize":
            if not args.out:
                raise CliError("synthesize requires --out", EXIT_CONFIG)
            return cmd_synthesize(_load(args), args.out, args.force, sub)
        if args.command == "reconstruct":
            if not args.out:
                raise CliError("reconstruct requires --out", EXIT_CONFIG)
            return cmd_reconstruct(_load(args), args.measurements, args.out, args.force, sub)
        if args.command == "check-hypotheses":
            return cmd_check_hypotheses(_load(args), args.out, sub)
        if args.command == "sweep":
            return cmd_sweep(_load(args), args.axis, args.out, args.force, sub)
        return cmd_symbols_verify(_load(args, required=False), args.out, args.seed)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingMeasurementError, FieldFormatError, GridError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, MissingMeasurementError) else exc
        print(f"data error: {msg}", file=sys.stderr)
        return EXIT_DATA
    except ReconstructionError as exc:
        if exc.stage == "hypotheses":
            print(f"hypothesis check failed: {exc.cause}; rerun with --force to proceed", file=sys.stderr)
            return EXIT_CHECK
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SolverError, EllipticityError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
