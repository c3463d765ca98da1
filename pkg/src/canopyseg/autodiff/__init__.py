"""Minimal reverse-mode automatic differentiation over dense tensors."""
from .ops import (
    BCE_EPS,
    add,
    bce_loss,
    concat_channels,
    conv2d,
    dropout,
    max_pool2d,
    mul,
    relu,
    sigmoid,
    slice_channels,
    tensor_sum,
    upsample_nearest2x,
)
from .tensor import Tape, Tensor, active_tape, default_dtype, precision, set_default_dtype

__all__ = [
    "BCE_EPS",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "bce_loss",
    "concat_channels",
    "conv2d",
    "default_dtype",
    "dropout",
    "max_pool2d",
    "mul",
    "precision",
    "relu",
    "set_default_dtype",
    "sigmoid",
    "slice_channels",
    "tensor_sum",
    "upsample_nearest2x",
]
