#!/usr/bin/env python3
"""
Tests for artifact writers, control persistence and the report aggregator
"""
import json
import sys

import numpy as np
import pytest

import artifacts
from errors import ConfigError, MissingArtifactError
from model import ImpulseControl
from presets import impulse_active
from qvi import make_solve_grid, solve_qvi


def test_json_is_sorted_and_plain(tmp_path):
    path = artifacts.write_json(tmp_path / "x.json", {"b": np.float64(1.5), "a": np.arange(2), "c": (1, 2)})
    text = path.read_text()
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": [0, 1], "b": 1.5, "c": [1, 2]}


def test_csv_keeps_full_precision(tmp_path):
    path = artifacts.write_csv(tmp_path / "x.csv", ["v", "flag"], [[0.1 + 0.2, True]])
    rows = artifacts.read_csv(path)
    assert float(rows[0]["v"]) == 0.1 + 0.2
    assert rows[0]["flag"] == "True"


def test_missing_files_raise(tmp_path):
    with pytest.raises(MissingArtifactError):
        artifacts.read_json(tmp_path / "nope.json")
    with pytest.raises(MissingArtifactError):
        artifacts.load_value_function(tmp_path / "nope.npz")


def test_control_round_trip(tmp_path):
    control = ImpulseControl(start_time=0.0, times=(0.25, 0.5), sizes=((1.0,), (0.5,)))
    artifacts.save_control(tmp_path / "c.json", control, [0.3], {"extra_times": [0.3]})
    loaded, x0, data = artifacts.load_control(tmp_path / "c.json")
    assert loaded == control
    assert x0.tolist() == [0.3]
    assert data["extra_times"] == [0.3]
    (tmp_path / "broken.json").write_text('{"x0": [0.0]}')
    with pytest.raises(ConfigError):
        artifacts.load_control(tmp_path / "broken.json")


def test_value_function_round_trip_and_plots(tmp_path):
    spec = impulse_active()
    grid = make_solve_grid(spec, nx=40, nt=32, x_min=-4.0, x_max=8.0, tau_values=[0.0])
    vf, policy = solve_qvi(spec, grid)
    artifacts.save_value_function(tmp_path / artifacts.VALUE_FILE, vf, policy)
    vf2, policy2 = artifacts.load_value_function(tmp_path / artifacts.VALUE_FILE)
    np.testing.assert_array_equal(vf2.values, vf.values)
    np.testing.assert_array_equal(policy2.intervene, policy.intervene)
    (profile,) = artifacts.emit_plot_data(tmp_path, "profile")
    assert len(artifacts.read_csv(profile)) == 40
    (region,) = artifacts.emit_plot_data(tmp_path, "region")
    assert len(artifacts.read_csv(region)) == 40 * 32
    with pytest.raises(ConfigError):
        artifacts.emit_plot_data(tmp_path, "histogram")


def test_report_folds_summaries(tmp_path):
    artifacts.write_json(tmp_path / "assumptions.json", {"passed": True})
    artifacts.write_json(tmp_path / "qvi_summary.json", {"checks": {"residual_p99": True, "closed_form": False}})
    report = artifacts.aggregate_report(tmp_path)
    assert report["commands"]["validate"]["passed"] is True
    assert report["commands"]["solve-qvi"]["passed"] is False
    assert report["passed"] is False
    assert "FAIL" in (tmp_path / "report.txt").read_text()


def test_value_rows_follow_the_header():
    spec = impulse_active()
    grid = make_solve_grid(spec, nx=40, nt=32, x_min=-4.0, x_max=8.0, tau_values=[0.0, 0.5])
    vf, policy = solve_qvi(spec, grid)
    header = artifacts.value_header(1)
    assert header == ["tau", "t", "x", "V", "intervene", "xi_hat_0"]
    rows = artifacts.value_rows(vf, policy)
    assert len(rows) == int(grid.valid().sum()) * 40
    assert all(len(r) == len(header) for r in rows)
    hits = [r for r in rows if r[4] == 1]
    assert len(hits) == int(policy.intervene[grid.valid()].sum())
    assert all(r[5] > 0.0 for r in hits)
    assert all(r[5] == 0.0 for r in rows if r[4] == 0)
    assert min(r[1] for r in rows if r[0] == 0.5) >= 0.5 - 1e-12


def test_trajectory_header_names():
    assert artifacts.trajectory_header(2) == [
        "path_id", "node_index", "time",
        "pre_value_0", "pre_value_1", "post_value_0", "post_value_1",
        "active_count",
    ]



if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
