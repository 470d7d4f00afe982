"""Minimal tensor engine: dense arrays, CNN ops, tape-ordered autodiff."""

from cmunet.engine.gradcheck import finite_diff_gradient, relative_error
from cmunet.engine.ops import (
    activation,
    add,
    batchnorm2d,
    bilinear_upsample2x,
    concat_channels,
    conv2d,
    elementwise,
    gelu,
    maxpool2x2,
    mul,
    relu,
    sigmoid,
    total,
)
from cmunet.engine.tensor import Node, Tape, Tensor, backward, no_grad

__all__ = [
    "Node", "Tape", "Tensor", "activation", "add", "backward", "batchnorm2d",
    "bilinear_upsample2x", "concat_channels", "conv2d", "elementwise",
    "finite_diff_gradient", "gelu", "maxpool2x2", "mul", "no_grad",
    "relative_error", "relu", "sigmoid", "total",
]
