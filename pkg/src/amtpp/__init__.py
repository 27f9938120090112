"""Attentive marked temporal point process for next-trip time, origin and destination."""

from .autodiff import Tensor, backward, grad_check
from .checkpoint import Checkpoint, CheckpointError
from .config import ABLATIONS, ConfigError, RunConfig, TrainConfig, load_config, parse_config
from .data import (PaddedBatch, SyntheticPopulationSpec, TripDataError, TripRecord, UserSequence,
                   generate_synthetic, load_csv, pad_batch, split_time, split_users, write_csv)
from .entropy import lz_entropy_rate
from .metrics import MetricsReport, entropy_report, evaluate, naive_baseline
from .model import AMTPP
from .time_head import ALLMixtureParams, LogNormalMixtureParams, sample_tau, tau_cdf
from .training import TrainResult, format_ablation_table, run_ablation, train

__all__ = [
    "ABLATIONS", "ALLMixtureParams", "AMTPP", "Checkpoint", "CheckpointError", "ConfigError",
    "LogNormalMixtureParams", "MetricsReport", "PaddedBatch", "RunConfig", "SyntheticPopulationSpec",
    "Tensor", "TrainConfig", "TrainResult", "TripDataError", "TripRecord", "UserSequence", "backward",
    "entropy_report", "evaluate", "format_ablation_table", "generate_synthetic", "grad_check",
    "load_config", "load_csv", "lz_entropy_rate", "naive_baseline", "pad_batch", "parse_config",
    "run_ablation", "sample_tau", "split_time", "split_users", "tau_cdf", "train", "write_csv",
]
