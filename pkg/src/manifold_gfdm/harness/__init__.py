"""Experiment configuration, sweeps and reporting."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config_text
from .runner import (RunRecord, SlopeFit, SlopeFitError, emit_csv, fit_slope, read_csv,
                     run_experiment, summarize)

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config_text", "RunRecord",
           "SlopeFit", "SlopeFitError", "emit_csv", "fit_slope", "read_csv", "run_experiment", "summarize"]
