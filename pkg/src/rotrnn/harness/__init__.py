"""Experiment plumbing: configs, training loop, checkpoints, probes, CLI."""

from .checkpoint import export_dataset, load_arrays, load_checkpoint, save_arrays, save_checkpoint
from .config import ExperimentConfig, config_from_dict, copy_task_config, load_config
from .probe import analytic_norm, bench_scan, probe_norms
from .train import RunResult, train_loop
