"""Configuration for the conical flow lab."""

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from error_handling import ConfigValidationError

# Load environment variables from .env file
load_dotenv()

SCHEMA_VERSION = 1


class GridConfig(BaseModel):
    """Truncation and resolution of the base chart s = log|z|^2."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    s_min: float = Field(-30.0, description="Left truncation (cone point side)")
    s_max: float = Field(30.0, description="Right truncation (opposite pole)")
    n_nodes: int = Field(2048, ge=16, description="Number of uniformly spaced nodes")

    @model_validator(mode="after")
    def _ordered(self) -> "GridConfig":
        if not self.s_min < self.s_max:
            raise ValueError("s_min must be smaller than s_max")
        return self


class MetricConfig(BaseModel):
    """Parameters of the shortest-path oracle and the collapse monitors."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    mesh_rings: int = Field(96, ge=8, description="Parallel circles of the 2-D mesh")
    n_theta: Optional[int] = Field(
        None, ge=8, description="Angular nodes; derived to make cells square if unset"
    )
    gh_radii: List[float] = Field(default_factory=lambda: [0.2, 0.1, 0.05])
    gh_power: int = Field(2, ge=1, description="Exponent L of the base ball radius")
    gh_pairs: int = Field(24, ge=2, description="Meridian sources for GH comparisons")
    metrication_tol: float = Field(0.0824, gt=0.0, lt=0.5)
    nbhd_constant: float = Field(2.0, gt=0.0)
    cap_rings: int = Field(32, ge=4, description="Rings of the cap mesh in neighborhood diameters")
    oracle_times: List[float] = Field(default_factory=lambda: [0.0, 1.0, 2.0, 5.0, 10.0])


class ProbeConfig(BaseModel):
    """Instant-smoothing probe: a short ladder at a second cone angle."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    beta: float = Field(0.8, gt=0.0, le=1.0)
    t0: float = Field(0.5, gt=0.0)
    t_min: float = Field(0.02, gt=0.0)
    mode: Literal["twisted", "normalized"] = "twisted"


class ModelConfig(BaseModel):
    """Full description of one laboratory run.

    Loaded from a single JSON document. Unknown keys are rejected and
    every field error is reported with its location.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: Literal[1]

    # Class data and cone
    a: float = Field(..., gt=0.0, description="Fiber Fubini-Study multiple")
    b: float = Field(..., gt=0.0, description="Base Fubini-Study multiple")
    beta: float = Field(..., gt=0.0, le=1.0, description="Cone angle is 2*pi*beta")
    delta: float = Field(..., gt=0.0, description="Cone smoothing constant")
    epsilon_ladder: List[float] = Field(..., min_length=1)
    mode: Literal["twisted", "normalized"] = "twisted"

    grid: GridConfig = Field(default_factory=GridConfig)

    # Time stepping
    dt: float = Field(5e-3, gt=0.0)
    t_end: float = Field(12.0, gt=0.0)
    newton_tol: float = Field(1e-10, gt=0.0)
    newton_max_iter: int = Field(30, ge=1)
    sample_dt: float = Field(0.05, gt=0.0)
    t_min: float = Field(0.02, gt=0.0)
    checkpoint_every: int = Field(20, ge=1)

    # Elliptic limit
    limit_tol: float = Field(1e-10, gt=0.0)
    limit_max_iter: int = Field(60, ge=1)
    limit_damping_budget: int = Field(30, ge=1)
    constant_g: Optional[float] = Field(None, gt=0.0)

    # Monitors
    gamma: Optional[float] = Field(None, gt=0.0)
    gke_window: float = Field(10.0, gt=0.0)
    cone_exclusion: float = Field(4.0, ge=0.0)
    monitor_window: float = Field(15.0, gt=0.0, description="|s| bound of pointwise curvature monitors")
    curvature_order: Literal[2, 4, 6] = 2
    lambda0: float = Field(0.5, gt=0.0)
    metric: MetricConfig = Field(default_factory=MetricConfig)

    # Optional stages
    refine: bool = False
    probe: Optional[ProbeConfig] = None
    richardson_t_end: float = Field(0.25, gt=0.0)

    @model_validator(mode="after")
    def _ladder_decreasing(self) -> "ModelConfig":
        ladder = self.epsilon_ladder
        if any(e <= 0.0 for e in ladder):
            raise ValueError("epsilon_ladder entries must be positive")
        if any(b >= a for a, b in zip(ladder, ladder[1:])):
            raise ValueError("epsilon_ladder must be strictly decreasing")
        return self

    @property
    def weight_gamma(self) -> float:
        """Weight exponent of the local trace-defect monitor."""
        if self.gamma is not None:
            return self.gamma
        return max(1.0 - self.beta, 1e-3)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form of this configuration."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_updates(self, **changes) -> "ModelConfig":
        """Return a validated copy with top-level fields replaced."""
        data = self.model_dump()
        data.update(changes)
        return ModelConfig.model_validate(data)

    def refined(self) -> "ModelConfig":
        """Same run at doubled spatial resolution."""
        grid = self.grid.model_copy(update={"n_nodes": 2 * self.grid.n_nodes})
        return self.with_updates(grid=grid.model_dump(), refine=False, probe=None)

    def probe_config(self) -> Optional["ModelConfig"]:
        """Configuration of the instant-smoothing probe ladder, if any."""
        if self.probe is None:
            return None
        return self.with_updates(
            beta=self.probe.beta,
            mode=self.probe.mode,
            t_end=self.probe.t0,
            t_min=self.probe.t_min,
            refine=False,
            probe=None,
        )


def load_model_config(path: str | Path) -> ModelConfig:
    """Parse and validate a JSON configuration file.

    Args:
        path: Location of the JSON document.

    Returns:
        ModelConfig: The validated configuration.

    Raises:
        ConfigValidationError: With one message per offending field.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigValidationError(f"Cannot read config {path}: {e}") from e

    try:
        return ModelConfig.model_validate(raw)
    except ValidationError as e:
        messages = [
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}"
            for err in e.errors()
        ]
        raise ConfigValidationError(
            "Invalid configuration:\n  " + "\n  ".join(messages), fields=messages
        ) from e


def reference_config(**overrides) -> ModelConfig:
    """The reference configuration of the acceptance suite."""
    data = {
        "schema_version": SCHEMA_VERSION,
        "a": 2.0,
        "b": 4.0,
        "beta": 0.5,
        "delta": 0.1,
        "epsilon_ladder": [0.1, 0.05, 0.025, 0.0125],
        "grid": {"s_min": -30.0, "s_max": 30.0, "n_nodes": 2048},
        "dt": 5e-3,
        "t_end": 12.0,
        "refine": True,
        "probe": {"beta": 0.8, "t0": 0.5, "t_min": 0.02},
    }
    data.update(overrides)
    return ModelConfig.model_validate(data)


@dataclass
class LabSettings:
    """Process-level settings taken from the environment.

    None of these are required; they only tune how runs are executed,
    never what they compute.
    """

    workers: Optional[int] = None
    log_level: str = "INFO"
    output_dir: str = "runs"

    def __post_init__(self):
        """Validate the worker override."""
        if self.workers is not None and self.workers < 1:
            raise ValueError("LAB_WORKERS must be a positive integer")

    @classmethod
    def from_env(cls) -> "LabSettings":
        """Create settings from environment variables."""
        workers = os.getenv("LAB_WORKERS")
        return cls(
            workers=int(workers) if workers else None,
            log_level=os.getenv("LAB_LOG_LEVEL", "INFO").upper(),
            output_dir=os.getenv("LAB_OUTPUT_DIR", "runs"),
        )

    def resolve_workers(self, requested: Optional[int] = None) -> int:
        """Worker count: CLI flag, then environment, then CPU count."""
        if requested is not None:
            return max(1, requested)
        if self.workers is not None:
            return self.workers
        return max(1, os.cpu_count() or 1)
