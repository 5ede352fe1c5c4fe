"""Numeric substrate: float64 tensors, reverse-mode tape, AdamW, checkpoints."""
from .tensor import DomainError, ShapeError, Tape, Tensor, as_tensor, backward, get_tape, no_grad
from . import ops
from .ops import (
    abs, add, check_finite, clamp, concat, conv2d, div, embedding_lookup, exp, gelu, getitem,
    l2_normalize, layer_norm, log, log_softmax, masked_fill, matmul, maximum, minimum, mul, neg,
    power, reduce_max, reduce_mean, reduce_sum, relu, reshape, sigmoid, slice_, softmax, sqrt, sub,
    swapaxes, tanh, transpose,
)
from .optim import AdamW, OptimizerState, adamw_step, clip_grad_norm
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import gradcheck, numeric_grad, rel_error
from .nn import (
    Conv2d, DecoderLayer, Embedding, EncoderLayer, FeedForward, LayerNorm, Linear, Module,
    MultiHeadAttention, param, xavier,
)

__all__ = [name for name in dir() if not name.startswith("_")]
