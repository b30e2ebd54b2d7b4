"""Minimal reverse-mode autodiff, layers and optimizer."""

from .checkpoint import load_container, save_container
from .layers import BatchNorm, Conv2d, ConvBnRelu, Linear, Module
from .ops import (
    avg_pool2d,
    avg_pool_global,
    batch_norm,
    concat,
    conv2d,
    linear,
    regression_loss,
    relu,
    softmax_cross_entropy,
)
from .optim import SgdConfig, lr_at_epoch, sgd_step
from .tensor import Parameter, Tensor, backward, no_grad

__all__ = [
    "BatchNorm", "Conv2d", "ConvBnRelu", "Linear", "Module", "Parameter", "SgdConfig", "Tensor",
    "avg_pool2d", "avg_pool_global", "backward", "batch_norm", "concat", "conv2d", "linear",
    "load_container", "lr_at_epoch", "no_grad", "regression_loss", "relu", "save_container",
    "sgd_step", "softmax_cross_entropy",
]
