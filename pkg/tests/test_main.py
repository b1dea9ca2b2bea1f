"""Tests for the command-line surface and its exit codes."""

import json

import pytest

from config import reference_config
from main import build_parser, main

from conftest import write_synthetic_run


def _write_config(path, **overrides):
    path.write_text(reference_config(refine=False, probe=None, **overrides).model_dump_json())
    return path


def test_degenerate_class_exits_with_validation_code(tmp_path, capsys):
    config = _write_config(tmp_path / "bad.json", a=2.0, b=1.0, beta=0.9)
    code = main(["run", "--config", str(config), "--out", str(tmp_path / "run")])
    assert code == 2
    assert "ClassDegeneracy" in capsys.readouterr().err


def test_unknown_key_is_rejected(tmp_path, capsys):
    data = json.loads(reference_config().model_dump_json())
    data["stepsize"] = 0.1
    path = tmp_path / "typo.json"
    path.write_text(json.dumps(data))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "run")]) == 2
    err = capsys.readouterr().err
    assert "ConfigValidationError" in err
    assert "stepsize" in err


def test_invalid_worker_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("LAB_WORKERS", "0")
    config = _write_config(tmp_path / "ok.json")
    assert main(["run", "--config", str(config)]) == 2
    assert "LAB_WORKERS" in capsys.readouterr().err


def test_verify_without_artifacts(tmp_path, capsys):
    assert main(["verify", str(tmp_path)]) == 4
    assert "MissingArtifact" in capsys.readouterr().err


def test_verify_prints_table_and_fails_on_missing_stages(tmp_path, capsys):
    run_dir = write_synthetic_run(tmp_path / "run", reference_config(refine=False, probe=None))
    assert main(["verify", str(run_dir)]) == 4
    out = capsys.readouterr().out
    assert "phi_dot decay" in out
    assert "missing artifact" in out


def test_resume_rejects_other_configuration(tmp_path, capsys):
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    (run_dir / "config.json").write_text(reference_config().model_dump_json())
    other = _write_config(tmp_path / "other.json", delta=0.05)
    code = main(["resume", "--resume-from", str(run_dir), "--config", str(other)])
    assert code == 2
    assert "does not match" in capsys.readouterr().err


def test_run_requires_config_or_resume():
    with pytest.raises(SystemExit):
        main(["run"])


def test_parser_subcommands():
    parser = build_parser()
    args = parser.parse_args(["sweep", "--config", "sweep.json", "--workers", "4"])
    assert args.workers == 4
    assert parser.parse_args(["report", "runs/abc"]).run_dir == "runs/abc"
