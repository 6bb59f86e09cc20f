"""Unsupervised federated learning with local and global knowledge distillation."""

from .data import AugmentPolicy, Dataset, PartitionSpec, dirichlet_partition, load_dataset
from .encoder import EncoderDescriptor, ModelParams, build_encoder, embed
from .federation import FederationConfig, aggregate, local_update, run_training

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy",
    "Dataset",
    "EncoderDescriptor",
    "FederationConfig",
    "ModelParams",
    "PartitionSpec",
    "aggregate",
    "build_encoder",
    "dirichlet_partition",
    "embed",
    "load_dataset",
    "local_update",
    "run_training",
]
