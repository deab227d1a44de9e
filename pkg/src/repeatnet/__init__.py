"""Session-based next-item recommendation with a repeat-explore mixture."""

from .data import DatasetSplit, PrefixExample, Session, Vocabulary
from .model import init_params, predict
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "DatasetSplit",
    "PrefixExample",
    "Session",
    "TrainConfig",
    "Vocabulary",
    "init_params",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
    "train",
]
