#!/usr/bin/env python3
"""
Tests for configuration loading and the command-line exit codes
"""
import json
import sys

import pytest

import cli
from config import load_run_config, load_problem, problem_from_dict
from errors import ConfigError
from presets import heat_kernel, loan


def run_cli(*argv):
    return cli.main(list(argv))


def test_parser_accepts_common_flags():
    args = cli.build_parser().parse_args(["simulate", "--preset", "loan", "--paths", "300", "--out", "somewhere"])
    assert args.command == "simulate"
    assert args.paths == 300
    assert args.out_dir == "somewhere"


def test_validate_heat_kernel(tmp_path):
    assert run_cli("validate", "--preset", "heat-kernel", "--out", str(tmp_path)) == cli.EXIT_OK
    report = json.loads((tmp_path / "assumptions.json").read_text())
    assert report["passed"] is True
    manifest = json.loads((tmp_path / "manifest_validate.json").read_text())
    assert manifest["command"] == "validate"
    assert manifest["outputs"] == ["assumptions.json"]


def test_unknown_preset_exit_code(tmp_path):
    assert run_cli("validate", "--preset", "no-such-problem", "--out", str(tmp_path)) == cli.EXIT_UNKNOWN_PRESET


def test_missing_problem_is_a_config_error(tmp_path):
    assert run_cli("validate", "--out", str(tmp_path)) == cli.EXIT_BAD_CONFIG


def test_check_mp_without_optimal_control(tmp_path):
    assert run_cli("check-mp", "--preset", "linear-adjoint", "--out", str(tmp_path)) == cli.EXIT_MISSING_ARTIFACT


def test_report_without_summaries(tmp_path):
    assert run_cli("report", "--out", str(tmp_path)) == cli.EXIT_MISSING_ARTIFACT


def test_malformed_config(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[run\npaths = ")
    assert run_cli("validate", "--config", str(bad), "--preset", "loan", "--out", str(tmp_path)) == cli.EXIT_BAD_CONFIG
    unknown = tmp_path / "unknown.toml"
    unknown.write_text("[qvi]\nnx = 100\nsmoothing = true\n")
    assert run_cli("validate", "--config", str(unknown), "--preset", "loan", "--out", str(tmp_path)) == cli.EXIT_BAD_CONFIG


def test_simulate_is_reproducible(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    for out in (first, second):
        code = run_cli("simulate", "--preset", "loan", "--paths", "2000", "--steps", "16", "--seed", "5", "--out", str(out))
        assert code == cli.EXIT_OK
    assert (first / "simulate_summary.json").read_bytes() == (second / "simulate_summary.json").read_bytes()
    assert (first / "trajectories.csv").read_bytes() == (second / "trajectories.csv").read_bytes()
    summary = json.loads((first / "simulate_summary.json").read_text())
    assert summary["control"]["impulses"] == [[0.3, [0.8]]]
    assert summary["checks"] == {"finite": True, "ci_half_width": True}
    header = (first / "trajectories.csv").read_text().splitlines()[0]
    assert header == "path_id,node_index,time,pre_value_0,post_value_0,active_count"


def test_simulate_fails_a_tight_confidence_target(tmp_path):
    cfg_file = tmp_path / "tight.toml"
    cfg_file.write_text("[simulate]\nci_tolerance = 1e-9\n")
    code = run_cli("simulate", "--config", str(cfg_file), "--preset", "loan", "--paths", "200", "--steps", "16", "--out", str(tmp_path))
    assert code == cli.EXIT_CHECK_FAILED
    summary = json.loads((tmp_path / "simulate_summary.json").read_text())
    assert summary["checks"]["ci_half_width"] is False
    assert summary["ci_half_width"] > 0.0


def test_solve_qvi_writes_the_value_table(tmp_path):
    cfg_file = tmp_path / "grid.toml"
    cfg_file.write_text("[qvi]\nnx = 64\nnt = 64\ntau_values = [0.0]\n")
    assert run_cli("solve-qvi", "--config", str(cfg_file), "--preset", "heat-kernel", "--out", str(tmp_path)) == cli.EXIT_OK
    rows = (tmp_path / "values.csv").read_text().splitlines()
    assert rows[0] == "tau,t,x,V,intervene,xi_hat_0"
    assert len(rows) == 1 + 64 * 64
    assert all(r.split(",")[4] == "0" for r in rows[1:])
    summary = json.loads((tmp_path / "qvi_summary.json").read_text())
    assert summary["checks"]["semiconvexity"] is True
    assert summary["semiconvexity"]["k_required"] <= 0.5 + 1e-6


def test_adjoint_then_check_mp(tmp_path):
    common = ["--preset", "linear-adjoint", "--paths", "1000", "--steps", "20", "--out", str(tmp_path)]
    assert run_cli("adjoint", *common) == cli.EXIT_OK
    saved = json.loads((tmp_path / "optimal_control.json").read_text())
    assert saved["extra_times"]
    summary = json.loads((tmp_path / "adjoint_summary.json").read_text())
    assert summary["checks"]["finite"] is True
    assert "feynman_kac" not in summary["checks"]
    manifest = json.loads((tmp_path / "manifest_adjoint.json").read_text())
    assert manifest["outputs"] == ["adjoint.csv", "adjoint_summary.json", "optimal_control.json"]
    assert run_cli("check-mp", *common) in (cli.EXIT_OK, cli.EXIT_CHECK_FAILED)
    report = json.loads((tmp_path / "mp_report.json").read_text())
    assert report["conditions"][0]["case"] == "interior"
    assert "first" in report["duality"]
    assert run_cli("report", "--out", str(tmp_path)) in (cli.EXIT_OK, cli.EXIT_CHECK_FAILED)
    assert (tmp_path / "report.txt").exists()


def test_adjoint_without_impulses_checks_feynman_kac(tmp_path):
    code = run_cli("adjoint", "--preset", "heat-kernel", "--paths", "1000", "--steps", "20", "--out", str(tmp_path))
    assert code in (cli.EXIT_OK, cli.EXIT_CHECK_FAILED)
    summary = json.loads((tmp_path / "adjoint_summary.json").read_text())
    assert "feynman_kac" in summary["checks"]
    assert (code == cli.EXIT_OK) == all(summary["checks"].values())


def test_flag_beats_file_beats_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("IMPULSE_PATHS", "500")
    monkeypatch.setenv("IMPULSE_SEED", "11")
    cfg_file = tmp_path / "run.toml"
    cfg_file.write_text("[run]\nseed = 12\n")
    cfg = load_run_config(str(cfg_file), {"paths": 300, "seed": None}, env_file=str(tmp_path / "absent.env"))
    assert cfg.run.paths == 300
    assert cfg.run.seed == 12
    cfg = load_run_config(None, {}, env_file=str(tmp_path / "absent.env"))
    assert cfg.run.paths == 500
    assert cfg.run.seed == 11


def test_bad_environment_value(monkeypatch, tmp_path):
    monkeypatch.setenv("IMPULSE_THREADS", "many")
    with pytest.raises(ConfigError):
        load_run_config(None, {}, env_file=str(tmp_path / "absent.env"))


def test_problem_definition_round_trip():
    spec = loan()
    assert problem_from_dict(spec.to_dict(), name=spec.name) == spec
    broken = spec.to_dict()
    del broken["costs"]["impulse"]["ell0"]
    with pytest.raises(ConfigError):
        problem_from_dict(broken)


def test_problem_file(tmp_path):
    path = tmp_path / "heat.toml"
    path.write_text(
        "[problem]\ndim_state = 1\nhorizon = 1.0\nsemantics = \"frozen\"\n"
        "[cone]\ngenerators = [[1.0]]\n"
        "[coefficients.drift]\nkind = \"constant\"\nparams = [0.0]\n"
        "[coefficients.diffusion]\nkind = \"constant\"\nparams = [1.0]\n"
        "[costs.running]\nkind = \"constant\"\nparams = [0.0]\n"
        "[costs.terminal]\nkind = \"bounded-trig\"\nparams = [1.0, 1.0, 1.0, 0.0]\n"
        "[costs.impulse]\nscale = 3.0\nell0 = 3.0\n"
    )
    spec = load_problem(str(path))
    assert spec.name == "heat"
    assert spec.to_dict()["costs"] == heat_kernel().to_dict()["costs"]
    assert spec.to_dict()["coefficients"] == heat_kernel().to_dict()["coefficients"]
    assert run_cli("validate", "--problem", str(path), "--out", str(tmp_path / "out")) == cli.EXIT_OK


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
