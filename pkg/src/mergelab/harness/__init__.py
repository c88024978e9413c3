"""Experiment orchestration: configs, checkpoints, evaluation and the CLI."""

from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .config import ExperimentConfig, default_config, load_config, parse_config
from .evaluate import bias_metric, evaluate, stitch_probe
from .experiment import Experiment, run_experiment

__all__ = [
    "ExperimentConfig", "Experiment", "bias_metric", "default_config", "evaluate", "load_checkpoint",
    "load_config", "parse_config", "run_experiment", "save_checkpoint", "stitch_probe",
]
