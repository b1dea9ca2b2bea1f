"""Error types, exit codes and recovery logic for the conical flow lab."""

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

logger = logging.getLogger(__name__)


class ErrorType(Enum):
    """Types of errors that can occur, keyed to CLI exit codes."""

    VALIDATION_ERROR = "validation_error"
    SOLVER_ERROR = "solver_error"
    VERIFICATION_ERROR = "verification_error"
    UNKNOWN_ERROR = "unknown_error"

    @property
    def exit_code(self) -> int:
        """Exit code of the CLI contract."""
        return {
            ErrorType.VALIDATION_ERROR: 2,
            ErrorType.SOLVER_ERROR: 3,
            ErrorType.VERIFICATION_ERROR: 4,
            ErrorType.UNKNOWN_ERROR: 3,
        }[self]


class LabError(Exception):
    """Base class of every error raised by the lab."""

    error_type = ErrorType.UNKNOWN_ERROR


class ConfigValidationError(LabError):
    """Configuration did not parse or validate."""

    error_type = ErrorType.VALIDATION_ERROR

    def __init__(self, message: str, fields: Optional[List[str]] = None):
        super().__init__(message)
        self.fields = fields or []


class ClassDegeneracy(LabError):
    """The base class degenerates no later than the fiber class."""

    error_type = ErrorType.VALIDATION_ERROR


class PositivityLoss(LabError):
    """A density that must stay positive became nonpositive."""

    error_type = ErrorType.SOLVER_ERROR

    def __init__(self, message: str, node: Optional[int] = None, s: Optional[float] = None):
        if node is not None:
            message = f"{message} (node {node}, s={s:.6g})"
        super().__init__(message)
        self.node = node
        self.s = s


class NonpositiveArgument(PositivityLoss):
    """The logarithm in the flow right-hand side received a nonpositive value."""


class NewtonDivergence(LabError):
    """Newton iteration hit its iteration or damping cap."""

    error_type = ErrorType.SOLVER_ERROR

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class StepUnderflow(LabError):
    """Time step halved below the configured floor."""

    error_type = ErrorType.SOLVER_ERROR


class NonpositiveValue(LabError):
    """A decay fit received a nonpositive sample."""

    error_type = ErrorType.VERIFICATION_ERROR


class TooFewSamples(LabError):
    """A decay fit window holds too few samples."""

    error_type = ErrorType.VERIFICATION_ERROR


class UnresolvedRegion(LabError):
    """A base ball is too small for the grid to resolve."""

    error_type = ErrorType.SOLVER_ERROR


class MissingArtifact(LabError):
    """An expected run artifact is absent or does not match the manifest."""

    error_type = ErrorType.VERIFICATION_ERROR


class VerificationFailure(LabError):
    """At least one acceptance criterion failed."""

    error_type = ErrorType.VERIFICATION_ERROR


@dataclass
class RetryConfig:
    """Configuration for retry behavior of solver stages."""

    max_retries: int = 1
    retry_on_errors: List[ErrorType] = field(
        default_factory=lambda: [ErrorType.SOLVER_ERROR]
    )


class ErrorHandler:
    """Centralized error classification with retry and fallback."""

    def __init__(self, config: RetryConfig = None):
        """Initialize error handler.

        Args:
            config: Retry configuration.
        """
        self.config = config or RetryConfig()
        self.error_history: List[Dict[str, Any]] = []

    def classify_error(self, error: Exception) -> ErrorType:
        """Classify the type of error.

        Args:
            error: The exception to classify.

        Returns:
            ErrorType: The classified error type.
        """
        if isinstance(error, LabError):
            return error.error_type
        if isinstance(error, (ValueError, TypeError, KeyError)):
            return ErrorType.VALIDATION_ERROR
        if isinstance(error, (FloatingPointError, ArithmeticError)):
            return ErrorType.SOLVER_ERROR
        return ErrorType.UNKNOWN_ERROR

    def should_retry(self, error: Exception, attempt: int) -> bool:
        """Determine if an error should trigger a retry.

        Args:
            error: The exception that occurred.
            attempt: Current attempt number (0-indexed).

        Returns:
            bool: True if should retry, False otherwise.
        """
        if attempt >= self.config.max_retries:
            return False
        return self.classify_error(error) in self.config.retry_on_errors

    def log_error(self, error: Exception, attempt: int, function_name: str):
        """Record and log an error.

        Args:
            error: The exception that occurred.
            attempt: Current attempt number.
            function_name: Name of the stage where the error occurred.
        """
        error_type = self.classify_error(error)
        self.error_history.append(
            {
                "timestamp": time.time(),
                "function": function_name,
                "error_type": error_type.value,
                "error_message": str(error),
                "attempt": attempt,
            }
        )
        logger.warning(
            f"Error in {function_name} (attempt {attempt + 1}): "
            f"{error_type.value} - {error}"
        )

    def retry_with_fallback(
        self,
        primary_func: Callable,
        fallback_func: Optional[Callable] = None,
        function_name: str = "unknown",
    ):
        """Run primary_func, retrying it, then fall back.

        Args:
            primary_func: Main function to execute.
            fallback_func: Optional fallback function.
            function_name: Name for logging.

        Returns:
            Result of primary_func or fallback_func.
        """
        last_error = None

        for attempt in range(self.config.max_retries + 1):
            try:
                result = primary_func()
                if attempt > 0:
                    logger.info(
                        f"Recovered in {function_name} after {attempt} retries"
                    )
                return result
            except Exception as error:
                last_error = error
                self.log_error(error, attempt, function_name)
                if not self.should_retry(error, attempt):
                    break

        if fallback_func:
            logger.info(f"Primary attempt failed, trying fallback for {function_name}")
            try:
                return fallback_func()
            except Exception as fallback_error:
                logger.error(f"Fallback also failed for {function_name}: {fallback_error}")
                raise fallback_error

        logger.error(f"All attempts failed for {function_name}")
        raise last_error


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code contract."""
    return ErrorHandler().classify_error(error).exit_code


class StepController:
    """Adaptive time step: halve on solver trouble, recover after clean steps.

    The step never exceeds the configured dt and never drops below
    dt * 2**-max_halvings.
    """

    def __init__(self, dt_max: float, clean_steps_to_double: int = 10, max_halvings: int = 20):
        """Initialize the controller.

        Args:
            dt_max: Configured step, also the cap.
            clean_steps_to_double: Accepted steps before the step doubles back.
            max_halvings: Halvings allowed before StepUnderflow.
        """
        self.dt_max = dt_max
        self.dt = dt_max
        self.clean_steps = 0
        self.clean_steps_to_double = clean_steps_to_double
        self.dt_floor = dt_max * 2.0 ** (-max_halvings)

    def reject(self, error: Exception) -> float:
        """Halve the step after a failed attempt."""
        self.dt *= 0.5
        self.clean_steps = 0
        if self.dt < self.dt_floor:
            raise StepUnderflow(
                f"Time step fell below {self.dt_floor:.3e} after repeated failures: {error}"
            )
        logger.warning(f"Halving time step to {self.dt:.3e}: {error}")
        return self.dt

    def accept(self) -> float:
        """Count a clean step and double back when allowed."""
        self.clean_steps += 1
        if self.dt < self.dt_max and self.clean_steps >= self.clean_steps_to_double:
            self.dt = min(2.0 * self.dt, self.dt_max)
            self.clean_steps = 0
            logger.info(f"Time step restored to {self.dt:.3e}")
        return self.dt

    def snapshot(self) -> Dict[str, float]:
        """Controller state for checkpoints."""
        return {"dt": self.dt, "clean_steps": self.clean_steps}

    def restore(self, dt: float, clean_steps: int):
        """Resume from a checkpointed controller state."""
        self.dt = dt
        self.clean_steps = int(clean_steps)
