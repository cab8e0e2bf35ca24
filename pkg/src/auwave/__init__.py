"""Sparse-buoy wave-height field reconstruction with a from-scratch numpy autodiff stack."""

__version__ = "0.1.0"

from .data import AlignedDataset, chronological_split, load_dataset, save_dataset, to_log_space
from .models import AUWave, AUWaveConfig, RWR, RWRConfig, build_model
from .train import TrainConfig, load_checkpoint, save_checkpoint

__all__ = [
    "AlignedDataset", "AUWave", "AUWaveConfig", "RWR", "RWRConfig", "TrainConfig",
    "build_model", "chronological_split", "load_checkpoint", "load_dataset",
    "save_checkpoint", "save_dataset", "to_log_space",
]
