"""Conical flow lab - numerical study of the twisted conical Kahler-Ricci flow on P1 x P1."""

__version__ = "0.1.0"

from config import ModelConfig, load_model_config, reference_config
from workflow import LabPipeline, run_limit, run_pipeline, run_sweep

__all__ = [
    "LabPipeline",
    "ModelConfig",
    "load_model_config",
    "reference_config",
    "run_limit",
    "run_pipeline",
    "run_sweep",
]
