"""Experiment orchestration, reports and the command-line interface."""
from .config import ExperimentConfig, load_config
from .experiments import (
    Lab, cross_validate, mask_ratio_trend, run_all, run_cross_validation, run_table1_experiment,
    run_theory, sweep_alpha, sweep_noise_type, sweep_retain_availability,
)
from .report import RunLedger, RunRecord, emit_report
