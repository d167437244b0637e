"""Configuration, staged pipeline, geometry suite and command line."""

from .config import ExperimentConfig
from .pipeline import RunManifest, StageError, run_pipeline, run_stage
from .suites import compare_oracle, run_geometry_suite

__all__ = ["ExperimentConfig", "RunManifest", "StageError", "run_pipeline", "run_stage",
           "compare_oracle", "run_geometry_suite"]
