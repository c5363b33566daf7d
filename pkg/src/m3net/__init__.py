"""Graph-free MLP-mixer traffic forecaster with a mixture-of-experts channel block."""

from .data import (CARDS, DatasetCard, NormStats, RawSeries, SplitSpec, WindowSet, batches,
                   load_raw, make_windows, write_raw)
from .model import M3Net, ModelConfig, load_checkpoint, parameter_count, save_checkpoint
from .trainer import MetricsReport, TrainConfig, evaluate, lr_at, train

__version__ = "0.1.0"

__all__ = ["CARDS", "DatasetCard", "NormStats", "RawSeries", "SplitSpec", "WindowSet", "batches",
           "load_raw", "make_windows", "write_raw", "M3Net", "ModelConfig", "load_checkpoint",
           "parameter_count", "save_checkpoint", "MetricsReport", "TrainConfig", "evaluate",
           "lr_at", "train"]
