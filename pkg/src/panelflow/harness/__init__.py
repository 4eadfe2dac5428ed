"""Configuration, experiment drivers and the command line."""
from .config import ConfigError, ExperimentConfig, GridSpec, RunOptions, parse_config, serialize_config
from .kmin import KminReport, find_kmin
from .presets import initial_field, initial_state
from .run import run_experiment

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "GridSpec",
    "KminReport",
    "RunOptions",
    "find_kmin",
    "initial_field",
    "initial_state",
    "parse_config",
    "run_experiment",
    "serialize_config",
]
