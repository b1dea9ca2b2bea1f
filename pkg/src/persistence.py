"""Run-directory artifacts: checkpoints, diagnostics tables, summaries and the manifest.

Layout of a run directory:

    manifest.json                 RunManifest (inventory + stage history)
    config.json                   the validated configuration
    limit/eps_<eps>.npz           LimitSolution per rung
    flow/eps_<eps>/checkpoint.npz flow checkpoint per rung
    flow/eps_<eps>/diagnostics.csv
    summary.json
    plots/*.svg
"""

import csv
import json
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from curvature_estimates import DiagnosticsSeries
from error_handling import ConfigValidationError, MissingArtifact

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
MANIFEST_NAME = "manifest.json"
FLOAT_FORMAT = "%.17g"


def _atomic_write(path: Path, write):
    """Write through a sibling temporary file and rename it into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        write(f)
    os.replace(tmp, path)


# Checkpoints


def save_checkpoint(path, header: Dict[str, Any], arrays: Dict[str, np.ndarray]):
    """Store arrays plus a JSON header in one .npz archive."""
    path = Path(path)
    header = {"schema_version": CHECKPOINT_SCHEMA, **header}
    payload = {name: np.asarray(value) for name, value in arrays.items()}
    payload["header"] = np.array(json.dumps(header, sort_keys=True))
    _atomic_write(path, lambda f: np.savez(f, **payload))
    logger.debug(f"Checkpoint written to {path} (t={header.get('t')})")


def load_checkpoint(path, expected_hash: Optional[str] = None) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Read a checkpoint archive.

    Raises:
        MissingArtifact: If the file does not exist.
        ConfigValidationError: On a schema or configuration-hash mismatch.
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as archive:
        header = json.loads(str(archive["header"]))
        arrays = {name: archive[name] for name in archive.files if name != "header"}

    if header.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ConfigValidationError(
            f"checkpoint {path} has schema {header.get('schema_version')}, expected {CHECKPOINT_SCHEMA}"
        )
    if expected_hash is not None and header.get("config_hash") != expected_hash:
        raise ConfigValidationError(f"checkpoint {path} was written by a different configuration")
    return header, arrays


# Tables


def write_table(path, columns: Sequence[str], rows: Iterable[Sequence[Any]]):
    """CSV with a fixed header; floats are written with 17 significant digits."""

    def cell(value):
        if isinstance(value, (float, np.floating)):
            return FLOAT_FORMAT % value
        return value

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([cell(v) for v in row])
    os.replace(tmp, path)


def read_table(path) -> Tuple[List[str], List[List[str]]]:
    """Header and raw string rows of a CSV table."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"table {path} not found")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        return header, [row for row in reader]


def write_series(path, series: DiagnosticsSeries):
    """DiagnosticsSeries as CSV, one row per sample."""
    write_table(path, series.columns, series.to_array().tolist())


def read_series(path) -> DiagnosticsSeries:
    """Parse a diagnostics CSV written by write_series."""
    header, rows = read_table(path)
    values = np.array([[float(v) for v in row] for row in rows], dtype=float)
    return DiagnosticsSeries.from_array(header, values.reshape(len(rows), len(header)))


def write_json(path, data: Dict[str, Any]):
    payload = json.dumps(data, indent=2, sort_keys=True, default=_json_default).encode("utf-8")
    _atomic_write(Path(path), lambda f: f.write(payload))


def read_json(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"{path} not found")
    return json.loads(path.read_text())


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


# Manifest


class FileEntry(BaseModel):
    """One artifact of the run directory."""

    path: str
    kind: str
    bytes: int


class StageStatus(BaseModel):
    stage: str
    status: str
    timestamp: str
    message: Optional[str] = None


class RunManifest(BaseModel):
    """Inventory and stage history of a run directory.

    Files are keyed by their path relative to the run directory; stage
    statuses are only ever appended.
    """

    config_hash: str
    created: str = Field(default_factory=lambda: datetime.now().isoformat())
    schema_version: int = CHECKPOINT_SCHEMA
    files: Dict[str, FileEntry] = Field(default_factory=dict)
    stages: List[StageStatus] = Field(default_factory=list)

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        path = Path(run_dir) / MANIFEST_NAME
        if not path.exists():
            raise MissingArtifact(f"manifest {path} not found")
        return cls.model_validate_json(path.read_text())

    @classmethod
    def open(cls, run_dir, config_hash: str) -> "RunManifest":
        """Load the manifest of run_dir, or start a new one.

        Raises:
            ConfigValidationError: If an existing manifest belongs to another configuration.
        """
        path = Path(run_dir) / MANIFEST_NAME
        if not path.exists():
            return cls(config_hash=config_hash)
        manifest = cls.load(run_dir)
        if manifest.config_hash != config_hash:
            raise ConfigValidationError(f"{run_dir} holds a run of a different configuration")
        return manifest

    def save(self, run_dir):
        payload = self.model_dump_json(indent=2).encode("utf-8")
        _atomic_write(Path(run_dir) / MANIFEST_NAME, lambda f: f.write(payload))

    def record_file(self, run_dir, path, kind: str):
        """Add or refresh an artifact with its current byte length."""
        run_dir = Path(run_dir)
        path = Path(path)
        relative = str(path.relative_to(run_dir)) if path.is_absolute() else str(path)
        size = (run_dir / relative).stat().st_size
        self.files[relative] = FileEntry(path=relative, kind=kind, bytes=size)

    def record_stage(self, stage: str, status: str, message: Optional[str] = None):
        self.stages.append(
            StageStatus(stage=stage, status=status, timestamp=datetime.now().isoformat(), message=message)
        )

    def stage_status(self, stage: str) -> Optional[str]:
        """Latest status of a stage, or None if it never ran."""
        for record in reversed(self.stages):
            if record.stage == stage:
                return record.status
        return None

    def problems(self, run_dir) -> List[str]:
        """Files that are missing or whose byte length changed."""
        run_dir = Path(run_dir)
        issues = []
        for entry in self.files.values():
            target = run_dir / entry.path
            if not target.exists():
                issues.append(f"missing: {entry.path}")
            elif target.stat().st_size != entry.bytes:
                issues.append(f"length changed: {entry.path} ({target.stat().st_size} != {entry.bytes})")
        return issues


def rung_dir(run_dir, eps: float, stage: str = "flow") -> Path:
    """Per-rung output directory of a ladder stage (flow, refined or probe)."""
    return Path(run_dir) / stage / f"eps_{eps:g}"


def limit_path(run_dir, eps: float) -> Path:
    return Path(run_dir) / "limit" / f"eps_{eps:g}.npz"
