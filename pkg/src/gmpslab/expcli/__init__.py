"""Experiment orchestration: configs, metrics files, plots, and the CLI."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .metrics import MetricsError, MetricsWriter, read_metrics
from .plotting import emit_plot

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "MetricsError",
    "MetricsWriter",
    "read_metrics",
    "emit_plot",
]
