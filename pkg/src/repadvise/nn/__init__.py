"""Minimal numerical core: tensors, autodiff, layers, losses, optimizers."""

from .gradcheck import finite_difference, grad_check, max_relative_error
from .layers import (
    Activation,
    Conv2d,
    Dense,
    LayerError,
    MaxPool2d,
    Network,
    network_from_config,
)
from .optim import SGD, Adam, TrainingError, train_step
from .tensor import (
    GraphError,
    Tensor,
    bce_loss,
    concat,
    conv2d,
    gather_rows,
    maxpool2d,
    mse_loss,
    stack,
)

__all__ = [
    "Activation",
    "Adam",
    "Conv2d",
    "Dense",
    "GraphError",
    "LayerError",
    "MaxPool2d",
    "Network",
    "SGD",
    "Tensor",
    "TrainingError",
    "bce_loss",
    "concat",
    "conv2d",
    "finite_difference",
    "gather_rows",
    "grad_check",
    "max_relative_error",
    "maxpool2d",
    "mse_loss",
    "network_from_config",
    "stack",
    "train_step",
]
