"""Experiment configuration, runners and reports."""

from .config import Experiment, ExperimentConfig, default_config, load_config, parse_config
from .report import ExperimentReport, Flag, MetricTable
from .runners import (run, run_collision_stats, run_dcoeff, run_diffusion, run_lanford, run_linear, run_reversal,
                      run_simulate)

__all__ = ["Experiment", "ExperimentConfig", "ExperimentReport", "Flag", "MetricTable", "default_config",
           "load_config", "parse_config", "run", "run_collision_stats", "run_dcoeff", "run_diffusion",
           "run_lanford", "run_linear", "run_reversal", "run_simulate"]
