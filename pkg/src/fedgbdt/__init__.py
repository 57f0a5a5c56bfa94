"""Federated gradient boosted decision trees.

Vertical training shares only perturbed bucket memberships; horizontal
training agrees on global quantiles and sums gradient histograms under
pairwise masking.
"""

__version__ = "0.1.0"

from .data import Dataset, Schema, auc, load_csv, split_train_test, synth_binary
from .gbdt import GbdtModel, TrainConfig, predict, predict_batch, train_centralized
from .horizontal import simulate_horizontal
from .secagg import AggParams
from .vertical import VerticalSimulation, run_vertical

__all__ = [
    "AggParams",
    "Dataset",
    "GbdtModel",
    "Schema",
    "TrainConfig",
    "VerticalSimulation",
    "auc",
    "load_csv",
    "predict",
    "predict_batch",
    "run_vertical",
    "simulate_horizontal",
    "split_train_test",
    "synth_binary",
    "train_centralized",
]
