"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from . import ops
from .gradcheck import GradCheckReport, grad_check
from .optim import Adam, AdamState, step_decay
from .tensor import NonFiniteError, Tensor, as_tensor

__all__ = ["Adam", "AdamState", "GradCheckReport", "NonFiniteError", "Tensor",
           "as_tensor", "grad_check", "ops", "step_decay"]
