"""Minimal dense reverse-mode differentiation engine."""
from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .ops import (
    ShapeError, add, add_bias, attention, bce_with_logits, bmm, concat, cross_entropy, expand, gelu,
    layer_norm, linear, log_softmax, matmul, max_axis, mean, mse, mul, multi_head_attention, permute,
    relu, reshape, scale, sigmoid, softmax, sub, sum, sum_axis, take, tanh, transpose, window_max,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tape, Tensor, active_tape, backward, tensor

__all__ = [name for name in dir() if not name.startswith("_")]
