"""Minimal differentiable-tensor core: layers, losses, Adam and gradient checks."""

from . import functional
from .gradcheck import check_layer, finite_difference_check, numerical_gradient, relative_error
from .layers import (
    LSTM,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2d,
    Param,
    ReLU,
    Reshape,
    Sequential,
    Sigmoid,
    Tanh,
    Upsample2d,
)
from .losses import bce_with_logits, mse_loss
from .optim import Adam, AdamState, adam_step

__all__ = [
    "functional", "check_layer", "finite_difference_check", "numerical_gradient", "relative_error",
    "LSTM", "Conv2d", "ConvTranspose2d", "Dense", "Dropout", "Flatten", "Layer", "MaxPool2d", "Param",
    "ReLU", "Reshape", "Sequential", "Sigmoid", "Tanh", "Upsample2d", "bce_with_logits", "mse_loss",
    "Adam", "AdamState", "adam_step",
]
