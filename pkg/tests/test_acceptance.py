"""Tests for the acceptance suite against synthetic run directories."""

import numpy as np
import pytest

import acceptance
from config import reference_config
from curvature_estimates import DiagnosticsSeries
from error_handling import MissingArtifact
from persistence import read_series, rung_dir, write_series

from conftest import write_synthetic_run


@pytest.fixture
def synthetic_run(tmp_path):
    config = reference_config(refine=False, probe=None)
    return write_synthetic_run(tmp_path / "run", config)


def _statuses(run_dir):
    return {r.number: r.status for r in acceptance.evaluate(run_dir)}


def test_synthetic_run_passes_decay_criteria(synthetic_run):
    statuses = _statuses(synthetic_run)
    for number in (1, 2, 3, 4, 7, 8, 9, 10, 11):
        assert statuses[number] == acceptance.PASS, number


def test_missing_stages_are_reported_individually(synthetic_run):
    """Without refined or probe rungs only those criteria report missing artifacts."""
    statuses = _statuses(synthetic_run)
    assert statuses[5] == acceptance.MISSING
    assert statuses[6] == acceptance.MISSING


def test_truncated_run_reports_unsatisfied_window(tmp_path):
    """A run that stops at t = 1 cannot be fitted; that is not a wrong rate."""
    config = reference_config(refine=False, probe=None, t_end=1.0)
    statuses = _statuses(write_synthetic_run(tmp_path / "short", config))
    for number in (2, 3, 4):
        assert statuses[number] == acceptance.WINDOW_UNSATISFIED, number


def test_tampering_one_value_flips_one_criterion(synthetic_run):
    before = _statuses(synthetic_run)

    finest = min(reference_config().epsilon_ladder)
    path = rung_dir(synthetic_run, finest) / "diagnostics.csv"
    series = read_series(path)
    rows = series.to_array()
    k = int(np.argmin(np.abs(series.times - 6.0)))
    rows[k, series.columns.index("sup_phi_dot")] = 0.0
    write_series(path, DiagnosticsSeries.from_array(series.columns, rows))

    after = _statuses(synthetic_run)
    changed = [n for n in before if before[n] != after[n]]
    assert changed == [3]
    assert after[3] == acceptance.FAIL


def test_missing_oracles_only_affect_oracle_criteria(synthetic_run):
    (synthetic_run / "oracles.json").unlink()
    statuses = _statuses(synthetic_run)
    for number in (1, 9, 10, 11):
        assert statuses[number] == acceptance.MISSING, number
    assert statuses[3] == acceptance.PASS


def test_normalized_mode_marks_limit_criteria_not_applicable(tmp_path):
    config = reference_config(refine=False, probe=None, mode="normalized", t_end=0.6, epsilon_ladder=[0.1, 0.05])
    statuses = _statuses(write_synthetic_run(tmp_path / "normalized", config))
    for number in (2, 4, 10):
        assert statuses[number] == acceptance.NOT_APPLICABLE


def test_evaluate_without_config(tmp_path):
    with pytest.raises(MissingArtifact):
        acceptance.evaluate(tmp_path)


def test_format_table_lists_every_criterion(synthetic_run):
    results = acceptance.evaluate(synthetic_run)
    table = acceptance.format_table(results)
    assert len(table.splitlines()) == len(acceptance.CRITERIA) + 2
    assert table.splitlines()[-1] == "FAILED"
    assert not acceptance.all_passed(results)


def test_diameter_detail_reports_literal_ratio(synthetic_run):
    """The diameter verdict prints the max/min ratio next to the envelope constant."""
    result = next(r for r in acceptance.evaluate(synthetic_run) if r.number == 8)
    assert result.status == acceptance.PASS
    assert "max/min 1.0000" in result.detail
    assert "sqrt(C) 1.0000" in result.detail
