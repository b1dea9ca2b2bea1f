"""Tests for error classification, exit codes, retries and step control."""

import pytest

from error_handling import (
    ClassDegeneracy,
    ConfigValidationError,
    ErrorHandler,
    ErrorType,
    MissingArtifact,
    NewtonDivergence,
    NonpositiveArgument,
    PositivityLoss,
    RetryConfig,
    StepController,
    StepUnderflow,
    TooFewSamples,
    exit_code_for,
)


@pytest.mark.parametrize(
    "error, expected",
    [
        (ConfigValidationError("bad key"), ErrorType.VALIDATION_ERROR),
        (ClassDegeneracy("a/2 >= T"), ErrorType.VALIDATION_ERROR),
        (NonpositiveArgument("log of -1"), ErrorType.SOLVER_ERROR),
        (NewtonDivergence("cap reached", residual=1.0), ErrorType.SOLVER_ERROR),
        (TooFewSamples("window"), ErrorType.VERIFICATION_ERROR),
        (ValueError("plain"), ErrorType.VALIDATION_ERROR),
        (ZeroDivisionError("x"), ErrorType.SOLVER_ERROR),
        (RuntimeError("other"), ErrorType.UNKNOWN_ERROR),
    ],
)
def test_error_classification(error, expected):
    assert ErrorHandler().classify_error(error) is expected


def test_exit_codes():
    assert exit_code_for(ConfigValidationError("x")) == 2
    assert exit_code_for(StepUnderflow("x")) == 3
    assert exit_code_for(MissingArtifact("x")) == 4
    assert exit_code_for(RuntimeError("x")) == 3


def test_positivity_loss_reports_location():
    error = PositivityLoss("omega <= 0", node=12, s=-3.5)
    assert "node 12" in str(error)
    assert error.s == -3.5
    assert isinstance(NonpositiveArgument("x"), PositivityLoss)


def test_solver_errors_are_retried_once():
    handler = ErrorHandler()
    calls = []

    def flaky():
        calls.append(1)
        if len(calls) < 2:
            raise NewtonDivergence("first attempt")
        return "ok"

    assert handler.retry_with_fallback(flaky, function_name="flaky") == "ok"
    assert len(calls) == 2
    assert handler.error_history[0]["error_type"] == "solver_error"


def test_validation_errors_go_straight_to_fallback():
    handler = ErrorHandler(RetryConfig(max_retries=3))
    calls = []

    def invalid():
        calls.append(1)
        raise ConfigValidationError("unknown key")

    assert handler.retry_with_fallback(invalid, lambda: "fallback") == "fallback"
    assert len(calls) == 1


def test_last_error_is_raised_without_fallback():
    handler = ErrorHandler()

    def diverging():
        raise NewtonDivergence("always")

    with pytest.raises(NewtonDivergence):
        handler.retry_with_fallback(diverging)
    assert len(handler.error_history) == 2


def test_step_controller_halves_and_recovers():
    controller = StepController(0.01, clean_steps_to_double=3)
    assert controller.reject(NewtonDivergence("x")) == pytest.approx(0.005)
    assert controller.reject(NewtonDivergence("x")) == pytest.approx(0.0025)
    controller.accept()
    controller.accept()
    assert controller.accept() == pytest.approx(0.005)
    for _ in range(3):
        controller.accept()
    assert controller.dt == pytest.approx(0.01)
    for _ in range(5):
        assert controller.accept() == pytest.approx(0.01)


def test_step_controller_underflow():
    controller = StepController(1.0, max_halvings=2)
    controller.reject(NewtonDivergence("x"))
    controller.reject(NewtonDivergence("x"))
    with pytest.raises(StepUnderflow):
        controller.reject(NewtonDivergence("x"))


def test_step_controller_snapshot_restore():
    controller = StepController(0.02)
    controller.reject(NewtonDivergence("x"))
    controller.accept()
    other = StepController(0.02)
    other.restore(**controller.snapshot())
    assert other.dt == controller.dt
    assert other.clean_steps == 1
