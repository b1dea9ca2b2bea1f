"""Tests for checkpoints, diagnostics tables and the run manifest."""

import json

import numpy as np
import pytest

from curvature_estimates import DiagnosticsSeries
from error_handling import ConfigValidationError, MissingArtifact
from persistence import (
    CHECKPOINT_SCHEMA,
    RunManifest,
    load_checkpoint,
    read_json,
    read_series,
    rung_dir,
    save_checkpoint,
    write_json,
    write_series,
)


def test_checkpoint_round_trip(tmp_path):
    path = tmp_path / "checkpoint.npz"
    arrays = {"phi": np.linspace(0.0, 1.0, 7), "steps": np.arange(3)}
    save_checkpoint(path, {"config_hash": "abc", "t": 0.5}, arrays)

    header, loaded = load_checkpoint(path, expected_hash="abc")
    assert header["schema_version"] == CHECKPOINT_SCHEMA
    assert header["t"] == 0.5
    np.testing.assert_array_equal(loaded["phi"], arrays["phi"])
    assert not (tmp_path / "checkpoint.npz.tmp").exists()


def test_checkpoint_rejects_other_configuration(tmp_path):
    path = tmp_path / "checkpoint.npz"
    save_checkpoint(path, {"config_hash": "abc"}, {"x": np.zeros(2)})
    with pytest.raises(ConfigValidationError):
        load_checkpoint(path, expected_hash="def")


def test_checkpoint_rejects_unknown_schema(tmp_path):
    path = tmp_path / "checkpoint.npz"
    save_checkpoint(path, {"schema_version": 99}, {"x": np.zeros(2)})
    with pytest.raises(ConfigValidationError):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingArtifact):
        load_checkpoint(tmp_path / "absent.npz")


def test_series_csv_keeps_full_precision(tmp_path):
    series = DiagnosticsSeries(["t", "value"])
    series.append({"t": 0.1, "value": 1.0 / 3.0})
    series.append({"t": 0.2, "value": float("nan")})
    path = tmp_path / "diagnostics.csv"
    write_series(path, series)

    assert path.read_text().splitlines()[0] == "t,value"
    loaded = read_series(path)
    assert loaded.columns == ["t", "value"]
    assert loaded.column("value")[0] == 1.0 / 3.0
    assert np.isnan(loaded.column("value")[1])


def test_json_handles_numpy_values(tmp_path):
    path = tmp_path / "summary.json"
    write_json(path, {"rate": np.float64(0.75), "values": np.arange(3)})
    assert read_json(path) == {"rate": 0.75, "values": [0, 1, 2]}


def test_manifest_detects_changed_files(tmp_path):
    target = tmp_path / "flow" / "eps_0.1" / "diagnostics.csv"
    target.parent.mkdir(parents=True)
    target.write_text("t\n0\n")

    manifest = RunManifest(config_hash="abc")
    manifest.record_file(tmp_path, target, "diagnostics")
    manifest.record_stage("flow", "completed")
    manifest.save(tmp_path)
    assert RunManifest.load(tmp_path).problems(tmp_path) == []

    target.write_text("t\n0\n1\n")
    problems = RunManifest.load(tmp_path).problems(tmp_path)
    assert len(problems) == 1 and "length changed" in problems[0]

    target.unlink()
    assert RunManifest.load(tmp_path).problems(tmp_path) == ["missing: flow/eps_0.1/diagnostics.csv"]


def test_manifest_stage_history_is_append_only(tmp_path):
    manifest = RunManifest(config_hash="abc")
    manifest.record_stage("flow", "started")
    manifest.record_stage("flow", "failed", "PositivityLoss")
    manifest.record_stage("flow", "completed")
    assert [s.status for s in manifest.stages] == ["started", "failed", "completed"]
    assert manifest.stage_status("flow") == "completed"
    assert manifest.stage_status("probe") is None


def test_manifest_belongs_to_one_configuration(tmp_path):
    RunManifest(config_hash="abc").save(tmp_path)
    assert RunManifest.open(tmp_path, "abc").config_hash == "abc"
    with pytest.raises(ConfigValidationError):
        RunManifest.open(tmp_path, "other")
    assert json.loads((tmp_path / "manifest.json").read_text())["config_hash"] == "abc"


def test_rung_dir_layout(tmp_path):
    assert rung_dir(tmp_path, 0.0125) == tmp_path / "flow" / "eps_0.0125"
    assert rung_dir(tmp_path, 0.05, "probe") == tmp_path / "probe" / "eps_0.05"
