"""Configuration, orchestration and command line for experiments."""

from .config import ConfigError, config_hash, load, run_id
from .runner import run_experiment

__all__ = ["ConfigError", "config_hash", "load", "run_id", "run_experiment"]
