"""Low-rank multiplicative implicit ensembles for tabular data."""

from .layers import EnsembleLinearParams, Kind, PleEmbedding, effective_weight, encode_ple, fit_ple
from .model import EnsembleModel, ModelConfig, init_model, member_loss, predict
from .trainer import TrainConfig, fit

__all__ = [
    "EnsembleLinearParams",
    "EnsembleModel",
    "Kind",
    "ModelConfig",
    "PleEmbedding",
    "TrainConfig",
    "effective_weight",
    "encode_ple",
    "fit",
    "fit_ple",
    "init_model",
    "member_loss",
    "predict",
]

__version__ = "0.1.0"
