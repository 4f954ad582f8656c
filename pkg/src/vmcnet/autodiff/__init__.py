from .tensor import Function, Tensor, as_tensor, backward, grad_enabled, no_grad, toposort
from .gradcheck import GradReport, grad_check, projected
from . import ops

__all__ = [
    "Function",
    "GradReport",
    "Tensor",
    "as_tensor",
    "backward",
    "grad_check",
    "grad_enabled",
    "no_grad",
    "ops",
    "projected",
    "toposort",
]
