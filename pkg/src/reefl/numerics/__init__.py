"""Tensor arithmetic with reverse-mode autodiff and a gradient checker."""
from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    add,
    broadcast_to,
    concat,
    grad_enabled,
    matmul,
    mul,
    narrow,
    no_grad,
    reshape,
    stack,
    sub,
    tmean,
    transpose,
    tsum,
    zeros,
)
from .functional import (
    PROB_FLOOR,
    cross_entropy,
    gelu,
    kl_divergence,
    layer_norm,
    log_softmax,
    softmax,
)
from .gradcheck import GradCheckReport, grad_check

__all__ = [
    "DEFAULT_DTYPE",
    "GradCheckReport",
    "PROB_FLOOR",
    "Tensor",
    "add",
    "broadcast_to",
    "concat",
    "cross_entropy",
    "gelu",
    "grad_check",
    "grad_enabled",
    "kl_divergence",
    "layer_norm",
    "log_softmax",
    "matmul",
    "mul",
    "narrow",
    "no_grad",
    "reshape",
    "softmax",
    "stack",
    "sub",
    "tmean",
    "transpose",
    "tsum",
    "zeros",
]
