"""Dense NCHW tensors with reverse-mode autodiff and Adam."""

from oxygan.tensor_core import io as oxt1
from oxygan.tensor_core.adam import AdamState, adam_step
from oxygan.tensor_core.ops import (
    RunningStats,
    abs_,
    add,
    batch_norm2d,
    concat_channels,
    conv2d,
    conv_transpose2d,
    dropout,
    instance_norm2d,
    leaky_relu,
    mean_all,
    mul,
    neg,
    relu,
    sigmoid,
    slice_channels,
    softplus,
    sub,
    sum_all,
    tanh_act,
)
from oxygan.tensor_core.tensor import GradTape, Tensor, backward

__all__ = [
    "AdamState", "GradTape", "RunningStats", "Tensor", "abs_", "adam_step", "add", "backward",
    "batch_norm2d", "concat_channels", "conv2d", "conv_transpose2d", "dropout", "instance_norm2d",
    "leaky_relu", "mean_all", "mul", "neg", "oxt1", "relu", "sigmoid", "slice_channels", "softplus",
    "sub", "sum_all", "tanh_act",
]
