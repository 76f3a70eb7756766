"""Experiment orchestration: data generation, the fine-tuning and
incremental-learning arms, evaluation, and report emission."""

from .config import ExperimentConfig, OutlierInjection, default_config
from .experiment import (cmd_eval, cmd_gen_data, cmd_report, cmd_run_ft_arm,
                         cmd_run_il_arm)

__all__ = [
    "ExperimentConfig", "OutlierInjection", "default_config",
    "cmd_gen_data", "cmd_run_ft_arm", "cmd_run_il_arm", "cmd_report", "cmd_eval",
]
