"""Minimal reverse-mode autodiff on numpy arrays."""
from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradReport, grad_check, relative_error
from .ops import bilinear_sample, scaled_dot_attention
from .tensor import ContractError, Tensor, as_tensor, default_dtype, no_grad, precision

__all__ = [
    "ops", "Tensor", "as_tensor", "no_grad", "precision", "default_dtype", "ContractError",
    "grad_check", "GradReport", "relative_error", "bilinear_sample", "scaled_dot_attention",
    "save_checkpoint", "load_checkpoint",
]
