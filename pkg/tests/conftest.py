"""Shared fixtures: small configurations that run in seconds."""

import math
import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from chart_geometry import build_reference  # noqa: E402
from config import reference_config  # noqa: E402
from curvature_estimates import DiagnosticsSeries, diagnostic_columns  # noqa: E402
from ma_flow import sample_times  # noqa: E402
from metric_space import FS_DIAMETER  # noqa: E402
from persistence import rung_dir, write_json, write_series  # noqa: E402

SMALL_METRIC = {
    "mesh_rings": 24,
    "gh_radii": [0.2],
    "gh_pairs": 6,
    "cap_rings": 8,
    "oracle_times": [0.0, 0.5, 1.0],
}


def small_config(**overrides):
    """Reference class data on a coarse grid with a short horizon."""
    data = {
        "grid": {"s_min": -20.0, "s_max": 20.0, "n_nodes": 401},
        "epsilon_ladder": [0.1, 0.05],
        "dt": 0.02,
        "t_end": 1.0,
        "sample_dt": 0.1,
        "checkpoint_every": 2,
        "refine": False,
        "probe": None,
        "metric": SMALL_METRIC,
        "richardson_t_end": 0.2,
    }
    data.update(overrides)
    return reference_config(**data)


@pytest.fixture
def config():
    return small_config()


@pytest.fixture
def refs(config):
    return build_reference(config, 0.1)


@pytest.fixture(autouse=True)
def _clean_lab_env(monkeypatch):
    for name in ("LAB_WORKERS", "LAB_LOG_LEVEL", "LAB_OUTPUT_DIR"):
        monkeypatch.delenv(name, raising=False)


def _synthetic_series(config) -> DiagnosticsSeries:
    """Monitors with clean exponential decay and constant bounds."""
    series = DiagnosticsSeries(diagnostic_columns(config))
    for t in sample_times(config):
        row = {column: 1.0 for column in series.columns}
        row.update(
            {
                "t": t,
                "area_defect": 1e-12,
                "sup_v": 0.5 * math.exp(-t),
                "sup_phi_dot": math.exp(-0.5 * t),
                "trace_defect_pos": math.exp(-0.5 * t),
                "trace_defect_abs": math.exp(-0.5 * t),
                "fiber_diameter": math.sqrt(config.a * math.exp(-t)) * FS_DIAMETER,
                "gh_bound": 1e-3,
            }
        )
        for k, eps_gh in enumerate(config.metric.gh_radii):
            row[f"nbhd_{k}"] = 0.5 * eps_gh
        series.append(row)
    return series


def write_synthetic_run(run_dir, config):
    """A run directory whose stored monitors satisfy the decay and oracle criteria."""
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(config.model_dump_json(indent=2))
    for eps in config.epsilon_ladder:
        write_series(rung_dir(run_dir, eps) / "diagnostics.csv", _synthetic_series(config))
    write_json(
        run_dir / "oracles.json",
        {
            "calibration": {"fs_curvature_error": 1e-10, "order": 6, "window": 5.0},
            "jacobian_fd_error": 1e-9,
            "metrication": {"fs": 0.01, "final": 0.02},
            "richardson_order": 1.02,
            "uniqueness_spread": 1e-11,
            "limit_diameter": 2.0,
            "fiber_circumference": [{"t": 0.0, "circumference": 6.28, "scaling_error": 1e-3}],
        },
    )
    return run_dir
