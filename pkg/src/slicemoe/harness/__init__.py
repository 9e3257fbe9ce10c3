"""Synthetic data, optimizer, training loop and ablation runner."""

from .ablation import SWEEPS, AblationRow, AblationTable, ablate
from .data import Dataset, generate_synthetic
from .optim import Adam, AdamHyper, AdamState, adam_step
from .train import EpochMetrics, EvalResult, TrainResult, evaluate, train, write_metrics_csv

__all__ = [
    "SWEEPS",
    "AblationRow",
    "AblationTable",
    "Adam",
    "AdamHyper",
    "AdamState",
    "Dataset",
    "EpochMetrics",
    "EvalResult",
    "TrainResult",
    "ablate",
    "adam_step",
    "evaluate",
    "generate_synthetic",
    "train",
    "write_metrics_csv",
]
