"""Minimal reverse-mode autodiff engine used by the meta-model."""

from . import ops
from .gradcheck import grad_check
from .params import ParamSet
from .tensor import Tensor, grad_enabled, no_grad

__all__ = ["Tensor", "ParamSet", "ops", "grad_check", "no_grad", "grad_enabled"]
