"""Minimal numpy network engine with per-channel dilated first layers."""

from .functional import adapt_first_layer, conv2d_backward, dilated_conv2d, softmax_cross_entropy
from .models import ConvSpec, Model, ModelSpec, build_model
from .train import Checkpoint, TrainConfig, extract_features, pretrain

__all__ = [
    "Checkpoint", "ConvSpec", "Model", "ModelSpec", "TrainConfig", "adapt_first_layer", "build_model",
    "conv2d_backward", "dilated_conv2d", "extract_features", "pretrain", "softmax_cross_entropy",
]
