"""Minimal reverse-mode differentiation, layers, loss, and optimizer."""

from . import autodiff, gradcheck, layers, loss, optim
from .autodiff import Parameter, UsageError, Var, backward
from .layers import (
    BatchNorm2d,
    Context,
    Conv3x3,
    Dense,
    Dropout,
    Dropout2d,
    LayerNorm,
    MultiHeadAttention,
    PositionalEmbedding,
    ReLU,
    Sequential,
    TransformerEncoderLayer,
)
from .loss import COSINE_EPS, TrainConfig, batch_cosine, mapping_loss, mapping_loss_terms
from .optim import AdamW

__all__ = [
    "AdamW",
    "BatchNorm2d",
    "COSINE_EPS",
    "Context",
    "Conv3x3",
    "Dense",
    "Dropout",
    "Dropout2d",
    "LayerNorm",
    "MultiHeadAttention",
    "Parameter",
    "PositionalEmbedding",
    "ReLU",
    "Sequential",
    "TrainConfig",
    "TransformerEncoderLayer",
    "UsageError",
    "Var",
    "autodiff",
    "backward",
    "batch_cosine",
    "gradcheck",
    "layers",
    "loss",
    "mapping_loss",
    "mapping_loss_terms",
    "optim",
]
