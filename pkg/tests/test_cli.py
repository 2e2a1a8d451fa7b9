import filecmp
import os

import numpy as np
import pytest

from pdrkit.cli import linear_fit, main, parse_subdomain, CliError
from pdrkit.fieldio import read_field, read_keyvalue
from pdrkit.scenarios import SQ1_BUMP


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "sq1.ini"
    path.write_text(SQ1_BUMP.format(cells=16) + "\n[sweep]\nepsilons = 0.1, 0.05, 0.025\n"
                    "noise_levels = 0, 0.01, 0.02\n")
    return str(path)


def _config_with(tmp_path, extra, name="extra.ini", text=None):
    path = tmp_path / name
    path.write_text((text or SQ1_BUMP.format(cells=16)) + extra)
    return str(path)


def test_round_trip(small_config, tmp_path, capsys):
    meas, rec = str(tmp_path / "meas"), str(tmp_path / "rec")
    assert main(["synthesize", "--config", small_config, "--out", meas]) == 0
    names = sorted(os.listdir(meas))
    assert sum(n.startswith("dH_") for n in names) == 5
    assert sum(n.startswith("H_") for n in names) == 6
    assert {"manifest.txt", "hypotheses.txt", "gamma_true.pdf1", "u_3.pdf1"} <= set(names)

    assert main(["reconstruct", meas, "--config", small_config, "--out", rec]) == 0
    metrics = read_keyvalue(os.path.join(rec, "metrics.txt"))
    for key in ("grid_nx", "trace_consistency", "hypotheses_pass", "rel_l2_gamma", "rel_h1_trace", "status"):
        assert key in metrics
    assert metrics["status"] == "pass" and metrics["grid_nx"] == "17"
    assert float(metrics["trace_consistency"]) <= 1e-12
    for f in ("gamma_rec.pdf1", "trace_rec.pdf1", "v_1.pdf1", "det_gradU.pdf1", "sigma_min_Z.pdf1"):
        assert os.path.exists(os.path.join(rec, f))
    assert "trace_consistency <= 1e-12: PASS" in capsys.readouterr().out


def test_synthesize_deterministic(tmp_path):
    cfg = _config_with(tmp_path, "\n[noise]\nrelative_amplitude = 0.01\n")
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["synthesize", "--config", cfg, "--out", a]) == 0
    assert main(["synthesize", "--config", cfg, "--out", b]) == 0
    match, mismatch, errors = filecmp.cmpfiles(a, b, os.listdir(a), shallow=False)
    assert not mismatch and not errors


def test_seed_override_changes_noise(tmp_path):
    cfg = _config_with(tmp_path, "\n[noise]\nrelative_amplitude = 0.01\n")
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    main(["synthesize", "--config", cfg, "--out", a])
    main(["synthesize", "--config", cfg, "--out", b, "--seed", "7"])
    fa, fb = read_field(os.path.join(a, "dH_11.pdf1")), read_field(os.path.join(b, "dH_11.pdf1"))
    assert not np.array_equal(fa.values, fb.values)
    assert "seed=7" in read_keyvalue(os.path.join(b, "manifest.txt"))["provenance.noise"]


def test_zero_perturbation_gives_zero_dH(tmp_path):
    text = SQ1_BUMP.format(cells=16).split("[perturbation]")[0] + "[perturbation]\nkind = zero\n"
    cfg = _config_with(tmp_path, "", text=text)
    meas, rec = str(tmp_path / "m"), str(tmp_path / "r")
    assert main(["synthesize", "--config", cfg, "--out", meas]) == 0
    assert not np.any(read_field(os.path.join(meas, "dH_23.pdf1")).values)
    assert main(["reconstruct", meas, "--config", cfg, "--out", rec]) == 0
    assert np.abs(read_field(os.path.join(rec, "gamma_rec.pdf1")).values).max() <= 1e-10


def test_missing_measurement_exit_code(small_config, tmp_path, capsys):
    meas = str(tmp_path / "meas")
    main(["synthesize", "--config", small_config, "--out", meas])
    os.remove(os.path.join(meas, "dH_12.pdf1"))
    assert main(["reconstruct", meas, "--config", small_config, "--out", str(tmp_path / "r")]) == 3
    assert "dH_12" in capsys.readouterr().err


def test_grid_mismatch_exit_code(small_config, tmp_path):
    meas = str(tmp_path / "meas")
    main(["synthesize", "--config", small_config, "--out", meas])
    other = _config_with(tmp_path, "", text=SQ1_BUMP.format(cells=8))
    assert main(["reconstruct", meas, "--config", other, "--out", str(tmp_path / "r")]) == 3


def test_subdomain_restricts_region(small_config, tmp_path):
    out = str(tmp_path / "h")
    assert main(["check-hypotheses", "--config", small_config, "--out", out,
                 "--subdomain", "0.25,0.25,0.75,0.75"]) == 0
    region = read_field(os.path.join(out, "mask_region.pdf1")).values
    assert 0 < region.sum() < region.size
    assert region[0, 0] == 0 and region[8, 8] == 1


def test_failing_hypotheses_need_force(tmp_path):
    cfg = _config_with(tmp_path, "\n[thresholds]\nc0 = 10\n")
    meas = str(tmp_path / "m")
    assert main(["check-hypotheses", "--config", cfg]) == 1
    assert main(["synthesize", "--config", cfg, "--out", meas]) == 1
    assert not os.path.exists(meas)
    assert main(["synthesize", "--config", cfg, "--out", meas, "--force"]) == 0
    assert main(["reconstruct", meas, "--config", cfg, "--out", str(tmp_path / "r")]) == 1
    assert main(["reconstruct", meas, "--config", cfg, "--out", str(tmp_path / "r"), "--force"]) == 0


def test_epsilon_sweep(small_config, tmp_path):
    out = str(tmp_path / "s")
    assert main(["sweep", "--axis", "epsilon", "--config", small_config, "--out", out]) == 0
    m = read_keyvalue(os.path.join(out, "sweep_epsilon_metrics.txt"))
    assert abs(float(m["fitted_slope"]) - 1) <= 0.1 and m["status"] == "pass"
    rows = [line for line in open(os.path.join(out, "sweep_epsilon.txt")) if not line.startswith("#")]
    assert len(rows) == 3
    assert open(os.path.join(out, "sweep_epsilon.txt")).read().count("epsilon") >= 2


def test_noise_sweep(tmp_path):
    # 16 cells is too coarse: discretisation error swamps the noise response
    cfg = _config_with(tmp_path, "\n[sweep]\nnoise_levels = 0, 0.01, 0.02\n", text=SQ1_BUMP.format(cells=32))
    out = str(tmp_path / "s")
    assert main(["sweep", "--axis", "noise", "--config", cfg, "--out", out]) == 0
    m = read_keyvalue(os.path.join(out, "sweep_noise_metrics.txt"))
    assert float(m["r2_gamma_l2"]) >= 0.95 and float(m["r2_trace_h1"]) >= 0.95


@pytest.mark.parametrize("argv", [
    ["synthesize", "--out", "x"],
    ["check-hypotheses"],
    ["check-hypotheses", "--config", "/nonexistent/c.ini"],
])
def test_usage_errors(argv):
    assert main(argv) == 2


def test_bad_subdomain(small_config):
    assert main(["check-hypotheses", "--config", small_config, "--subdomain", "0.5,0,0.2,1"]) == 2
    with pytest.raises(CliError):
        parse_subdomain("1,2,3")


def test_invalid_thread_count(small_config, monkeypatch):
    monkeypatch.setenv("PDRKIT_THREADS", "zero")
    assert main(["sweep", "--axis", "noise", "--config", small_config]) == 2


def test_linear_fit_exact():
    slope, intercept, r2 = linear_fit([0, 1, 2, 3], [1, 3, 5, 7])
    assert slope == pytest.approx(2) and intercept == pytest.approx(1) and r2 == pytest.approx(1)
