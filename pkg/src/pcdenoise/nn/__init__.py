"""Minimal reverse-mode differentiation engine, layers and optimizer."""

from .layers import MLP, Linear, ResidualBlock
from .params import ModelParams, adam_step, load_checkpoint, save_checkpoint
from .tensor import (
    Tensor,
    add,
    backward,
    concat,
    gather,
    get_default_dtype,
    grad,
    matmul,
    mse,
    mul,
    neg,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    set_default_dtype,
    softmax,
    sub,
    tensor,
)
