"""Multi-study sparse variational autoencoder with spike-and-slab lasso masks."""

from .io import MultiStudyDataset, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .model import MSSVAE, MaskSet
from .objective import TrainConfig, TrainState, elbo_batch, em_train, init_params

__version__ = "0.1.0"

__all__ = [
    "MSSVAE",
    "MaskSet",
    "MultiStudyDataset",
    "TrainConfig",
    "TrainState",
    "elbo_batch",
    "em_train",
    "init_params",
    "load_checkpoint",
    "load_dataset",
    "save_checkpoint",
    "save_dataset",
]
