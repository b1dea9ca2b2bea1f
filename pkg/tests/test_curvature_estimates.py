"""Tests for curvature and trace monitors, diagnostics rows and decay fits."""

import math

import numpy as np
import pytest

from chart_geometry import Density, RadialGrid, fs_density
from curvature_estimates import (
    DiagnosticsSeries,
    diagnostic_columns,
    fit_decay,
    instant_smoothing_report,
    local_c0_defect,
    phi_dot_evolution_defect,
    record_diagnostics,
    scalar_curvature,
    trace_monitors,
    twisted_scalar,
    u_diagnostics,
    weighted_trace_defect,
)
from error_handling import NonpositiveValue, TooFewSamples
from limit_ma import solve_limit
from ma_flow import initial_state


def test_fubini_study_has_scalar_curvature_two():
    """Sixth-order differences reproduce R(FS) = 2 to 1e-8 on the reference grid."""
    grid = RadialGrid(-30.0, 30.0, 2048)
    fs = Density(grid, fs_density(grid.nodes), name="fs")
    curvature = scalar_curvature(fs, order=6)
    window = np.abs(grid.nodes) <= 5.0
    assert np.max(np.abs(curvature[window] - 2.0)) < 1e-8


def test_scalar_curvature_scales_inversely():
    """R(c rho) = R(rho) / c."""
    grid = RadialGrid(-10.0, 10.0, 801)
    fs = Density(grid, fs_density(grid.nodes))
    np.testing.assert_allclose(
        scalar_curvature(fs.scaled(4.0))[1:-1], scalar_curvature(fs)[1:-1] / 4.0, rtol=1e-6
    )


def test_twisted_scalar_at_initial_time_drops_fiber(config, refs):
    """In the twisted flow the fiber contribution cancels against the twist."""
    state = initial_state(refs)
    expected = scalar_curvature(Density(refs.grid, state.omega)) - refs.omega0_base.values / (
        refs.classes.t_max * state.omega
    )
    np.testing.assert_allclose(twisted_scalar(state, refs)[1:-1], expected[1:-1], rtol=1e-10, atol=1e-10)


def test_trace_monitors_at_initial_time(refs):
    """At t = 0 the fiber trace of omega0 is one and the ratio is omega0*/(omega0 + chi*)."""
    state = initial_state(refs)
    traces = trace_monitors(state, refs)
    assert traces.sup_trace_omega0 > 1.0
    ratio = refs.omega0_star.values / (refs.omega0_base.values + refs.chi_star.values)
    assert traces.ratio_min == pytest.approx(ratio.min())
    assert traces.ratio_max == pytest.approx(ratio.max())


def test_weighted_trace_defect_vanishes_at_limit(refs):
    state = initial_state(refs)
    pos, absolute = weighted_trace_defect(state, refs, state.omega, 0.5)
    assert pos == 0.0
    assert absolute == 0.0


def test_record_diagnostics_fills_every_column(config, refs):
    state = initial_state(refs)
    limit = solve_limit(refs, config)
    row = record_diagnostics(state, refs, config, limit)
    assert set(diagnostic_columns(config)) <= set(row)
    for column in diagnostic_columns(config):
        if not column.startswith("nbhd_"):
            assert math.isfinite(row[column]), column
    assert row["sup_v"] == pytest.approx(np.max(np.abs(refs.delta * refs.eta - limit.psi)))
    assert row["area_defect"] < 1e-6
    assert row["total_diameter"] == pytest.approx(math.hypot(row["fiber_diameter"], row["base_diameter"]))


def test_record_diagnostics_without_limit_zeroes_limit_columns(config, refs):
    row = record_diagnostics(initial_state(refs), refs, config)
    for column in ("sup_v", "trace_defect_abs", "local_c0_defect", "gh_bound"):
        assert row[column] == 0.0


def test_diagnostics_series_rejects_incomplete_rows():
    series = DiagnosticsSeries(["t", "x"])
    series.append({"t": 0.0, "x": 1.0})
    with pytest.raises(ValueError):
        series.append({"t": 1.0})
    with pytest.raises(ValueError):
        series.append({"t": 0.0, "x": 2.0})
    assert len(series) == 1


def test_diagnostics_series_window():
    series = DiagnosticsSeries.from_array(["t", "x"], np.array([[0.0, 1.0], [1.0, 2.0], [2.0, 3.0]]))
    np.testing.assert_array_equal(series.window(0.5, 2.0), [False, True, True])
    assert series.row(1) == {"t": 1.0, "x": 2.0}


def test_fit_decay_recovers_rate():
    t = np.linspace(0.0, 12.0, 241)
    fit = fit_decay(t, 3.0 * np.exp(-0.75 * t), (2.0, 12.0))
    assert fit.rate == pytest.approx(0.75, abs=1e-10)
    assert fit.samples == 201
    assert fit.rms < 1e-10


def test_fit_decay_window_guard():
    """Too few samples in the window is reported as such, not as a wrong rate."""
    t = np.linspace(0.0, 1.0, 21)
    with pytest.raises(TooFewSamples, match="unsatisfied"):
        fit_decay(t, np.exp(-t), (2.0, 12.0))


def test_fit_decay_rejects_nonpositive_values():
    t = np.linspace(2.0, 12.0, 20)
    values = np.exp(-t)
    values[5] = 0.0
    with pytest.raises(NonpositiveValue):
        fit_decay(t, values, (2.0, 12.0))


def _smoothing_series(eps: float) -> DiagnosticsSeries:
    times = np.concatenate([[0.0, 0.02, 0.04], np.arange(1, 11) * 0.05])
    series = DiagnosticsSeries(["t", "sup_abs_scalar"])
    for t in times:
        series.append({"t": t, "sup_abs_scalar": 1.0 / (t + eps)})
    return series


def test_instant_smoothing_report_detects_c_over_t():
    """sup|R| ~ 1/(t + eps): t sup|R| stays bounded while early values blow up."""
    report = instant_smoothing_report({eps: _smoothing_series(eps) for eps in (0.1, 0.05)}, 0.5, 0.02)
    assert report.weighted_drift < 0.2
    assert report.early_growth[-1] > 1.5
    assert report.consistent


def _plateau_series(early: float) -> DiagnosticsSeries:
    series = DiagnosticsSeries(["t", "sup_abs_scalar"])
    for t, value in ((0.02, early), (0.1, 1.0), (0.5, 4.0)):
        series.append({"t": t, "sup_abs_scalar": value})
    return series


@pytest.mark.parametrize(
    "early,consistent",
    [((1.0, 1.0, 1.0, 2.0), False), ((1.0, 2.0, 4.0, 8.0), True)],
)
def test_instant_smoothing_report_needs_growth_on_every_halving(early, consistent):
    """A ladder that only blows up at the finest rung is not a C/t profile."""
    ladder = (0.4, 0.2, 0.1, 0.05)
    report = instant_smoothing_report(
        {eps: _plateau_series(value) for eps, value in zip(ladder, early)}, 0.5, 0.02
    )
    assert report.weighted_drift == 0.0
    assert report.early_growth == pytest.approx([b / a for a, b in zip(early, early[1:])])
    assert report.consistent is consistent


def test_local_c0_defect_against_itself(refs):
    state = initial_state(refs)
    mask = np.abs(refs.grid.nodes) <= 5.0
    assert local_c0_defect(state, state.omega, mask) == 0.0
    assert local_c0_defect(state, 2.0 * state.omega, mask) == pytest.approx(0.5)


def test_u_diagnostics_vanish_at_initial_time(refs):
    state = initial_state(refs)
    mask = np.abs(refs.grid.nodes) <= 5.0
    grad, lap = u_diagnostics(state, refs, mask)
    assert grad == 0.0
    assert lap == 0.0


def test_phi_dot_evolution_defect_measures_the_evolution_equation(refs):
    """Zero when phi_dot evolves by -R~ - c - phi_dot + (1-beta) theta / rho_omega over the step."""
    previous = initial_state(refs)
    dt = 0.01
    mask = np.abs(refs.grid.nodes) <= 5.0
    moved = previous.advanced(t=dt, step=1)
    forcing = (
        -twisted_scalar(moved, refs)
        - refs.classes.trace_offset()
        + (1.0 - refs.beta) * refs.current / moved.omega
    )
    phi_dot = (previous.phi_dot / dt + forcing) / (1.0 / dt + 1.0)

    exact = moved.advanced(phi_dot=phi_dot)
    assert phi_dot_evolution_defect(previous, exact, refs, mask) < 1e-9

    shifted = moved.advanced(phi_dot=phi_dot + 0.3)
    assert phi_dot_evolution_defect(previous, shifted, refs, mask) == pytest.approx(0.3 * (1.0 / dt + 1.0), rel=1e-9)
