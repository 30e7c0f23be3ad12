"""Experiment harness: configs, orchestration, verification, CLI."""

from .config import RunConfig, SCHEMA_VERSION, load_config
from .runner import RunArtifacts, execute_run, run_compare, run_sweep

__all__ = [
    "RunConfig",
    "SCHEMA_VERSION",
    "load_config",
    "RunArtifacts",
    "execute_run",
    "run_compare",
    "run_sweep",
]
