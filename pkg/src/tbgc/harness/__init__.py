"""Synthetic three-task benchmark, experiment runner and CLI."""

from .config import ConfigError, ExperimentConfig, load_config, loads_config, save_config
from .runner import RunReport, compare_aug_modes, compare_clip_modes, run_experiment

__all__ = [
    "ConfigError", "ExperimentConfig", "RunReport", "compare_aug_modes", "compare_clip_modes",
    "load_config", "loads_config", "run_experiment", "save_config",
]
