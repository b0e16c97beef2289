"""Disentangled biometric / non-biometric features for clothes-changing person re-ID."""

__version__ = "0.1.0"

from ._validation import ValidationError
from .data import ReIDDataset, SynthConfig, SynthDataset, generate_dataset, load_dataset, pk_sample, save_dataset
from .engine import NonFiniteLossError, TrainConfig, extract_features, fit, load_checkpoint, lr_schedule
from .estimator import DisentangledReIDEncoder
from .evalkit import build_protocol_mask, cluster_report, cmc_map, linear_probe, pairwise_distances
from .model import DisentangleNet, FeatureBundle, ModelConfig
from .objectives import (
    GradientReversal,
    LossWeights,
    TripletConfig,
    batch_hard_triplet_loss,
    contrastive_loss,
    cross_entropy_loss,
    grad_reverse,
    total_loss,
)

__all__ = [
    "__version__",
    "ValidationError",
    "NonFiniteLossError",
    "SynthConfig",
    "SynthDataset",
    "ReIDDataset",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "pk_sample",
    "ModelConfig",
    "DisentangleNet",
    "FeatureBundle",
    "GradientReversal",
    "grad_reverse",
    "contrastive_loss",
    "cross_entropy_loss",
    "batch_hard_triplet_loss",
    "total_loss",
    "LossWeights",
    "TripletConfig",
    "TrainConfig",
    "lr_schedule",
    "fit",
    "load_checkpoint",
    "extract_features",
    "DisentangledReIDEncoder",
    "pairwise_distances",
    "build_protocol_mask",
    "cmc_map",
    "linear_probe",
    "cluster_report",
]
