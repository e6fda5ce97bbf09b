"""Float64 tensors, reverse-mode autodiff, AdamW and a finite-difference oracle."""

from .functional import (
    IGNORE_INDEX,
    EmptyTargetsWarning,
    bce_with_logits,
    cross_entropy,
    dropout,
    embedding,
    gelu,
    layer_norm,
    linear,
    log_softmax,
    masked_softmax,
    silu,
    softmax,
)
from .gradcheck import GradCheckReport, gradient_check
from .optim import AdamW, adamw_step, zero_grad
from .tensor import Parameter, Tensor, as_tensor, concat, no_grad, stack, where

__all__ = [
    "IGNORE_INDEX",
    "AdamW",
    "EmptyTargetsWarning",
    "GradCheckReport",
    "Parameter",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "bce_with_logits",
    "concat",
    "cross_entropy",
    "dropout",
    "embedding",
    "gelu",
    "gradient_check",
    "layer_norm",
    "linear",
    "log_softmax",
    "masked_softmax",
    "no_grad",
    "silu",
    "softmax",
    "stack",
    "where",
    "zero_grad",
]
