"""Reverse-mode automatic differentiation over dense real tensors."""

from . import ops
from .gradcheck import finite_diff_check, numeric_grad, relative_error
from .ops import OPS, forward_op
from .optim import Adam, AdamState, adam_step
from .tensor import GradError, ShapeError, Tensor, grad, no_grad, precision

__all__ = [
    "ops", "OPS", "forward_op", "Tensor", "grad", "no_grad", "precision",
    "GradError", "ShapeError", "Adam", "AdamState", "adam_step",
    "finite_diff_check", "numeric_grad", "relative_error",
]
