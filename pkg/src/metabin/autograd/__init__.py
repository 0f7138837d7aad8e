from .tensor import Tensor, as_tensor, backward, is_grad_enabled, no_grad
from .gradcheck import GradCheckResult, finite_diff_check
from . import functional

__all__ = [
    "Tensor",
    "as_tensor",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "finite_diff_check",
    "GradCheckResult",
    "functional",
]
