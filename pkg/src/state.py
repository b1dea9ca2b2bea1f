"""State carried by the flow solver and by the run pipeline."""

import logging
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Any, Dict, List, Optional, TypedDict

import numpy as np

from chart_geometry import values_from_increments
from config import ModelConfig

# Set up logging
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlowState:
    """Snapshot of the reduced potential flow on one regularization rung.

    The potential is held as its value at s_min plus first differences;
    `phi` is rebuilt from them. `omega` caches the metric density
    chi_t + delta * eta'' + phi'' and is strictly positive.
    """

    t: float
    anchor: float
    increments: np.ndarray = field(repr=False)
    phi_dot: np.ndarray = field(repr=False)
    eps: float
    omega: np.ndarray = field(repr=False)
    step: int = 0
    phi: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "phi", values_from_increments(self.anchor, self.increments))

    def advanced(self, **changes) -> "FlowState":
        """Copy with fields replaced."""
        return replace(self, **changes)

    def sup_phi(self) -> float:
        """Grid maximum of |phi|."""
        return float(np.max(np.abs(self.phi)))

    def sup_phi_dot(self) -> float:
        """Grid maximum of |d/dt phi|."""
        return float(np.max(np.abs(self.phi_dot)))


class StageRecord(TypedDict):
    """Status of one pipeline stage."""

    stage: str
    status: str
    timestamp: str
    message: Optional[str]


class RunState(TypedDict):
    """State passed between the nodes of the run pipeline.

    Heavy results (trajectories, limit solutions) stay in memory for the
    stages that follow; everything needed later is also written to the
    run directory.
    """

    config: ModelConfig
    run_dir: str
    workers: int
    resume: bool

    # Results by stage
    limits: Dict[float, Any]
    rungs: Dict[float, Any]
    refined: Dict[float, Any]
    probe: Dict[float, Any]
    oracles: Dict[str, Any]
    summary: Dict[str, Any]

    # Bookkeeping
    stages: List[StageRecord]
    should_end: bool

    # Error handling
    last_error: Optional[str]
    error_type: Optional[str]
    retry_count: int


def create_initial_state(
    config: ModelConfig, run_dir: str, workers: int = 1, resume: bool = False
) -> RunState:
    """Create the initial state for a new or resumed run.

    Args:
        config: Validated run configuration.
        run_dir: Output directory of the run.
        workers: Worker processes for independent rungs.
        resume: Continue unfinished rungs from their checkpoints.

    Returns:
        RunState: The initial pipeline state.
    """
    return RunState(
        config=config,
        run_dir=run_dir,
        workers=workers,
        resume=resume,
        limits={},
        rungs={},
        refined={},
        probe={},
        oracles={},
        summary={},
        stages=[],
        should_end=False,
        last_error=None,
        error_type=None,
        retry_count=0,
    )


def validate_state(state: RunState) -> bool:
    """Validate the pipeline state.

    Args:
        state: The state to validate.

    Returns:
        bool: True if state is valid, False otherwise.
    """
    try:
        if not isinstance(state.get("config"), ModelConfig):
            logger.error("config must be a ModelConfig")
            return False

        if not state.get("run_dir"):
            logger.error("run_dir is required")
            return False

        if not isinstance(state.get("workers", 1), int) or state.get("workers", 1) < 1:
            logger.error("workers must be a positive integer")
            return False

        for record in state.get("stages", []):
            for key in ("stage", "status", "timestamp"):
                if key not in record:
                    logger.error(f"Stage record missing field: {key}")
                    return False

        return True

    except Exception as e:
        logger.error(f"Error validating state: {e}")
        return False


def record_stage(state: RunState, stage: str, status: str, message: Optional[str] = None) -> RunState:
    """Append a stage transition; transitions are never rewritten."""
    state["stages"] = state.get("stages", []) + [
        StageRecord(
            stage=stage,
            status=status,
            timestamp=datetime.now().isoformat(),
            message=message,
        )
    ]
    return state


def handle_state_error(state: RunState, error: str, error_type: Optional[str] = None) -> RunState:
    """Handle and log state errors.

    Args:
        state: Current state.
        error: Error message.
        error_type: Classified error type value.

    Returns:
        RunState: State updated with error information.
    """
    logger.error(f"State error: {error}")

    state["last_error"] = error
    state["error_type"] = error_type
    state["retry_count"] = state.get("retry_count", 0) + 1
    return state
