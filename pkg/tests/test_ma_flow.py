"""Tests for the backward-Euler potential flow and the epsilon ladder."""

import numpy as np
import pytest

import ma_flow
from curvature_estimates import diagnostic_columns
from error_handling import NonpositiveArgument
from ma_flow import (
    SLACK_TOL,
    area_defect,
    cauchy_differences,
    epsilon_ladder,
    flow_rhs,
    initial_state,
    jacobian_fd_error,
    linearized_rhs,
    richardson_order,
    run_flow,
    sample_times,
    step_implicit,
)
from persistence import load_checkpoint

from conftest import small_config


def test_sample_times_layout(config):
    """Zero, geometric early samples from t_min, then the uniform cadence to t_end."""
    times = sample_times(config)
    assert times[0] == 0.0
    assert times[1] == pytest.approx(config.t_min)
    assert times[-1] == pytest.approx(config.t_end)
    assert np.all(np.diff(times) > 0.0)
    assert np.any(np.isclose(times, 0.5))


def test_initial_state_is_model_metric(refs):
    state = initial_state(refs)
    assert state.t == 0.0
    assert np.all(state.phi == 0.0)
    np.testing.assert_allclose(state.omega, refs.omega0_star.values)


def test_flow_rhs_rejects_nonpositive_metric(refs):
    """A potential with strongly negative curvature leaves the Kahler cone."""
    state = initial_state(refs)
    bent = state.advanced(increments=-np.cumsum(np.ones_like(state.increments)) * refs.grid.spacing**2 * 50.0)
    with pytest.raises(NonpositiveArgument):
        flow_rhs(bent, refs)


def test_step_implicit_solves_backward_euler(config, refs):
    """The accepted step satisfies phi_new - phi_old = dt F(phi_new) to Newton tolerance."""
    state = initial_state(refs)
    new = step_implicit(state, config.dt, refs, config)
    assert new.t == pytest.approx(config.dt)
    assert new.step == 1
    residual = new.phi - state.phi - config.dt * flow_rhs(new, refs)
    assert np.max(np.abs(residual)) < config.newton_tol
    np.testing.assert_allclose(new.phi_dot, flow_rhs(new, refs))


def test_step_conserves_class_area(config, refs):
    state = initial_state(refs)
    for _ in range(5):
        state = step_implicit(state, config.dt, refs, config)
    assert area_defect(state, refs) < 1e-6


def test_newton_matrix_matches_finite_differences(config, refs):
    state = initial_state(refs)
    state = step_implicit(state, config.dt, refs, config)
    assert jacobian_fd_error(state, refs, config.dt) < 1e-6


def test_linearization_is_contractive(config, refs):
    """v -> v''/rho - v damps constants at rate one."""
    state = initial_state(refs)
    constant = np.ones(refs.grid.n_nodes)
    np.testing.assert_allclose(linearized_rhs(state, refs, constant), -constant, atol=1e-12)


def test_richardson_order_is_first_order(config):
    order = richardson_order(config, 0.1)
    assert abs(order - 1.0) < 0.2


@pytest.mark.slow
def test_run_flow_records_every_sample(config, refs):
    run = run_flow(config, 0.1, refs=refs)
    assert run.completed
    assert len(run.series) == sample_times(config).size
    assert run.series.columns == diagnostic_columns(config)
    assert np.all(np.diff(run.series.times) > 0.0)
    assert np.max(run.series.column("area_defect")) < 1e-6
    assert run.final.t == pytest.approx(config.t_end)


@pytest.mark.slow
def test_run_flow_respects_maximum_principle(config):
    """The discrete maximum-principle inequality holds on every accepted step."""
    run = run_flow(config.with_updates(t_end=0.3), 0.1)
    assert run.completed
    assert run.worst_slack <= SLACK_TOL
    assert np.all(run.series.column("max_principle_slack") <= SLACK_TOL)


@pytest.mark.slow
def test_smooth_angle_rungs_coincide():
    """With beta = 1 the regularization is void and every rung runs the same flow."""
    config = small_config(beta=1.0, t_end=0.3)
    runs = [run_flow(config, eps) for eps in config.epsilon_ladder]
    assert all(run.completed for run in runs)
    assert max(cauchy_differences(runs)) < 1e-10


@pytest.mark.slow
def test_resume_reproduces_uninterrupted_run(config, tmp_path, monkeypatch):
    """An interrupted run continued from its checkpoint matches the uninterrupted one."""
    reference = run_flow(config, 0.1)

    path = tmp_path / "checkpoint.npz"
    original = ma_flow.step_implicit
    calls = {"n": 0}

    def interrupted(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 30:
            raise KeyboardInterrupt
        return original(*args, **kwargs)

    monkeypatch.setattr(ma_flow, "step_implicit", interrupted)
    with pytest.raises(KeyboardInterrupt):
        run_flow(config, 0.1, checkpoint_path=path)
    monkeypatch.setattr(ma_flow, "step_implicit", original)

    header, _ = load_checkpoint(path, config.config_hash())
    assert not header["completed"]
    assert header["t"] < config.t_end

    resumed = run_flow(config, 0.1, checkpoint_path=path, resume=True)
    assert resumed.completed
    np.testing.assert_allclose(resumed.series.to_array(), reference.series.to_array(), rtol=1e-12, atol=1e-14)


@pytest.mark.slow
def test_ladder_is_independent_of_worker_count():
    config = small_config(t_end=0.3)
    serial = epsilon_ladder(config, workers=1)
    parallel = epsilon_ladder(config, workers=2)
    assert not serial.partial
    assert len(serial.cauchy) == 1
    for eps in config.epsilon_ladder:
        np.testing.assert_array_equal(serial.runs[eps].series.to_array(), parallel.runs[eps].series.to_array())
    assert serial.finest.eps == min(config.epsilon_ladder)
