"""Reverse-mode differentiation on numpy arrays."""

from . import functional, kernels
from .gradcheck import finite_diff_check
from .nn import Conv2d, Module, xavier_normal
from .optim import Adam, AdamState, adam_step
from .tensor import (
    Tensor,
    default_dtype,
    get_default_dtype,
    grad,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
    set_grad_enabled,
)

__all__ = [
    "Adam",
    "AdamState",
    "Conv2d",
    "Module",
    "Tensor",
    "adam_step",
    "default_dtype",
    "finite_diff_check",
    "functional",
    "get_default_dtype",
    "grad",
    "is_grad_enabled",
    "kernels",
    "no_grad",
    "set_default_dtype",
    "set_grad_enabled",
    "xavier_normal",
]
