"""Central finite-difference verification of analytic gradients."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from .tensor import Tensor, no_grad


@dataclass
class GradCheckResult:
    max_error: float
    n_checked: int
    excluded: tuple = field(default_factory=tuple)

    def passed(self, tol=1e-4):
        return self.n_checked > 0 and self.max_error < tol


def _scalar(value):
    data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    if data.size != 1:
        raise ContractError(f"checked function must return a scalar, got shape {data.shape}")
    return float(data.reshape(-1)[0])


def finite_diff_check(f, x, h=1e-5, kink_tol=1e-2):
    """Compare the analytic gradient of ``f`` at ``x`` with central differences.

    ``f`` is called as ``f(x)`` and must return a scalar Tensor; it may also
    ignore its argument and read ``x`` through a closure, since ``x.data`` is
    perturbed in place. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.

    A coordinate whose one-sided slopes disagree by more than ``kink_tol``
    (relative) sits on a non-differentiable point such as a relu kink or a
    max tie; it is reported in ``excluded`` and left out of ``max_error``.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    if not x.requires_grad:
        raise ContractError("x must require grad")

    with no_grad():
        first = f(x)
        second = f(x)
    if not np.array_equal(first.data, second.data):
        raise ContractError("function is not deterministic; repeated evaluation differs")
    f0 = _scalar(first)

    saved_grad = x.grad
    x.grad = None
    loss = f(x)
    loss.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved_grad

    flat = x.data.reshape(-1)
    worst = 0.0
    excluded = []
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(x))
            flat[i] = orig - h
            fm = _scalar(f(x))
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            right = (fp - f0) / h
            left = (f0 - fm) / h
            if abs(right - left) > kink_tol * max(1.0, abs(numeric)):
                excluded.append(i)
                continue
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return GradCheckResult(worst, flat.size - len(excluded), tuple(excluded))
