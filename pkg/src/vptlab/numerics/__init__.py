"""Tensor arithmetic, reverse-mode autodiff and Adam."""

from vptlab.numerics import functional
from vptlab.numerics.functional import cross_entropy, matmul, softmax
from vptlab.numerics.nn import BatchNorm, Embedding, LayerNorm, Linear, Module
from vptlab.numerics.optim import Adam, AdamState, adam_step
from vptlab.numerics.tensor import Parameter, Tensor, get_dtype, is_grad_enabled, no_grad, precision

__all__ = [
    "Adam",
    "AdamState",
    "BatchNorm",
    "Embedding",
    "LayerNorm",
    "Linear",
    "Module",
    "Parameter",
    "Tensor",
    "adam_step",
    "cross_entropy",
    "functional",
    "get_dtype",
    "is_grad_enabled",
    "matmul",
    "no_grad",
    "precision",
    "softmax",
]
