"""Minimal differentiable kernels and the Adam optimizer."""

from .adam import AdamState, adam_step
from .backend import active_backend, select_kernels
from .gradcheck import grad_check
from .ops import (
    add,
    add_const,
    blurpool_downsample,
    channel_norm,
    clamp,
    concat,
    conv2d,
    exp,
    gaussian_kernel,
    gaussian_lowpass,
    global_avg_pool,
    leaky_relu,
    linear,
    mean_all,
    mul,
    nn_upsample,
    reshape,
    scale,
    square,
    sub,
    sum_all,
)
from .tensor import Tensor, no_grad

__all__ = [
    "AdamState",
    "Tensor",
    "active_backend",
    "adam_step",
    "add",
    "add_const",
    "blurpool_downsample",
    "channel_norm",
    "clamp",
    "concat",
    "conv2d",
    "exp",
    "gaussian_kernel",
    "gaussian_lowpass",
    "global_avg_pool",
    "grad_check",
    "leaky_relu",
    "linear",
    "mean_all",
    "mul",
    "nn_upsample",
    "no_grad",
    "reshape",
    "scale",
    "select_kernels",
    "square",
    "sub",
    "sum_all",
]
