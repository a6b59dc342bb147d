"""Experiment configuration, run directories, metrics and the command line."""

from .config import ConfigError, ExperimentConfig, load_config, toy_config
from .experiments import compare_runs, export_heatmap, run_method, search, sweep_lambda, train_teacher

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "compare_runs",
    "export_heatmap",
    "load_config",
    "run_method",
    "search",
    "sweep_lambda",
    "toy_config",
    "train_teacher",
]
