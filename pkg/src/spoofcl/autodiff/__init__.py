"""Minimal reverse-mode autodiff engine on numpy arrays."""

from .functional import (
    batch_norm_1d,
    cosine_similarity,
    gelu,
    layer_norm,
    linear,
    relu,
    scaled_dot_attention,
    softmax,
)
from .nn import BatchNorm1d, LayerNorm, Linear, Module, Parameter, trunc_normal
from .optim import Adam, clip_grad_norm
from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    clamp,
    concatenate,
    div,
    exp,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    set_finite_check,
    sqrt,
    stack,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "Adam", "BatchNorm1d", "LayerNorm", "Linear", "Module", "NonFiniteError",
    "Parameter", "Tensor", "add", "batch_norm_1d", "clamp", "clip_grad_norm",
    "concatenate", "cosine_similarity", "div", "exp", "gelu", "is_grad_enabled",
    "layer_norm", "linear", "log", "matmul", "mean", "mul", "no_grad", "relu",
    "reshape", "scaled_dot_attention", "set_finite_check", "softmax", "sqrt",
    "stack", "sub", "transpose", "trunc_normal", "tsum",
]
