import csv
import json

import numpy as np
import pytest

from biostab import cli, neutral_curve
from biostab.stability import EigenSolveError

SMALL = ["--nz", "61", "--set", "n_tau=101", "--set", "n_mu=8", "--set", "n_phi=8"]


def run(tmp_path, *args, name="out"):
    out = tmp_path / name
    code = cli.main([*args, "--out", str(out), *SMALL])
    manifest = json.loads((out / "manifest.json").read_text()) if (out / "manifest.json").exists() else None
    return code, out, manifest


def test_base_state_without_scattering(tmp_path):
    code, out, manifest = run(tmp_path, "base-state", "--albedo", "0")
    assert code == 0
    assert [s["status"] for s in manifest["stages"]] == ["ok"]
    with open(out / "radiative.csv") as fh:
        rows = list(csv.DictReader(fh))
    tau = np.array([float(r["tau"]) for r in rows])
    G = np.array([float(r["G_s"]) for r in rows])
    assert np.max(np.abs(G - np.exp(-tau))) < 1e-8
    report = json.loads((out / "sublayer.json").read_text())
    assert abs(report["mean_concentration"] - 1) < 1e-8
    assert (out / "light.dat").read_text().startswith("# tau G_s")
    assert not list(out.glob("*.partial"))
    assert manifest["params"]["albedo"] == 0.0 and manifest["taxis"]["name"] == "tanh"


def test_runs_are_deterministic(tmp_path):
    _, _, a = run(tmp_path, "base-state", name="a")
    _, _, b = run(tmp_path, "base-state", name="b")
    assert a["stages"][0]["outputs"] == b["stages"][0]["outputs"]


def test_growth(tmp_path, capsys):
    code, out, _ = run(tmp_path, "growth", "--k", "2", "--R", "0")
    assert code == 0
    assert "sigma =" in capsys.readouterr().out
    result = json.loads((out / "growth.json").read_text())
    assert result["sigma_re"] < 0
    header = (out / "eigenfunction.csv").read_text().splitlines()[0]
    assert header == "z,W_re,W_im,Z_re,Z_im,theta_re,theta_im"


def test_critical(tmp_path):
    code, out, manifest = run(tmp_path, "critical", "--albedo", "0.42", "--k-range", "1:4:16")
    assert code == 0
    crit = json.loads((out / "critical.json").read_text())
    assert crit["k_c"] * crit["lambda_c"] == pytest.approx(2 * np.pi)
    assert not crit["edge_minimum"]
    assert [s["name"] for s in manifest["stages"]] == ["base-state", "neutral", "critical"]
    assert len((out / "neutral_curve.csv").read_text().splitlines()) == 17


def test_gaps_give_nonzero_exit_and_partial_files(tmp_path, monkeypatch):
    real = neutral_curve._neutral_point

    def flaky(problem, k, mode=1):
        if k > 3.5:
            raise EigenSolveError("no neutral point at this k")
        return real(problem, k, mode)

    monkeypatch.setattr(neutral_curve, "_neutral_point", flaky)
    code, out, manifest = run(tmp_path, "neutral", "--k-range", "1:4:16")
    assert code == 1
    assert (out / "neutral_curve.csv.partial").exists()
    summary = json.loads((out / "neutral_summary.json.partial").read_text())
    assert len(summary["gaps"]) > 0
    assert manifest["stages"][-1]["status"] == "failed"


def test_stage_failure_keeps_partial_output(tmp_path, monkeypatch):
    def broken(self, path):
        raise OSError("disk full")

    monkeypatch.setattr(neutral_curve.NeutralCurve, "to_dat", broken)
    code, out, manifest = run(tmp_path, "neutral", "--k-range", "1:4:16")
    assert code == 1
    assert (out / "neutral_curve.csv.partial").exists()
    assert not (out / "neutral_curve.csv").exists()
    assert "disk full" in manifest["stages"][-1]["error"]


def test_configuration_errors(tmp_path, capsys):
    assert cli.main(["base-state", "--albedo", "1.5", "--out", str(tmp_path)]) == 2
    assert "albedo" in capsys.readouterr().err
    assert cli.main(["base-state", "--set", "bogus=1", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["neutral", "--k-range", "1:4:8"])
    assert exc.value.code == 2


def test_config_file_and_flag_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "run.toml"
    cfg.write_text("albedo = 0.3\naniso = 0.4\n")
    monkeypatch.setenv("BIOSTAB_CONFIG", str(cfg))
    args = cli.build_parser().parse_args(["base-state", "--aniso", "0.8", "--preset", "table2"])
    p = cli.resolve_params(args)
    assert (p.albedo, p.aniso, p.extinction) == (0.3, 0.8, 1.0)


def test_calibrated_taxis_is_recorded(tmp_path):
    code, _, manifest = run(tmp_path, "base-state", "--taxis", "calibrated")
    assert code == 0
    assert manifest["params"]["taxis_amplitude"] == neutral_curve.CALIBRATED_TAXIS["taxis_amplitude"]
    assert manifest["calibration"]["source"] == "frozen calibration"
