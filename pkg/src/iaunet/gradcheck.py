"""Finite-difference verification of analytic gradients.

The numerical side never touches the tape: it evaluates the checked
function twice per coordinate with recording suspended, so it stays an
independent oracle for the reverse-mode rules.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractViolation
from .tensor import Tape, Tensor, no_grad

DENOM_FLOOR = 1e-8


def analytic_gradient(fn: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    """d fn(x) / dx via the tape."""
    x.grad = None
    x.requires_grad = True
    with Tape() as tape:
        y = fn(x)
        if y.size != 1:
            raise ContractViolation(f"gradcheck target must be scalar, got {y.shape}")
        tape.backward(y)
    return np.zeros_like(x.data) if x.grad is None else x.grad.copy()


def numerical_gradient(fn: Callable[[Tensor], Tensor], x: Tensor,
                       h: float = 1e-5) -> np.ndarray:
    """Central differences (fn(x + h e_i) - fn(x - h e_i)) / 2h."""
    if h <= 0:
        raise ContractViolation(f"step size must be positive, got {h}")
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = fn(x).item()
            flat[i] = orig - h
            lo = fn(x).item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def finite_diff_check(fn: Callable[[Tensor], Tensor], x: Tensor,
                      h: float = 1e-5) -> float:
    """Worst relative disagreement between analytic and numerical gradients.

    The denominator is floored at 1e-8 so exact zeros compare cleanly.
    """
    a = analytic_gradient(fn, x)
    n = numerical_gradient(fn, x, h)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), DENOM_FLOOR)
    return float(np.max(np.abs(a - n) / denom))


def weight_finite_diff_check(forward: Callable[[], Tensor], weight: Tensor,
                             h: float = 1e-5) -> float:
    """``finite_diff_check`` for a weight owned by a module.

    ``forward`` re-evaluates the scalar head from scratch; the analytic
    gradient is read off ``weight.grad`` while the numerical side
    perturbs ``weight.data`` in place with recording suspended.
    """
    weight.grad = None
    with Tape() as tape:
        y = forward()
        if y.size != 1:
            raise ContractViolation(f"gradcheck target must be scalar, got {y.shape}")
        tape.backward(y)
    a = np.zeros_like(weight.data) if weight.grad is None else weight.grad.copy()

    n = np.zeros_like(weight.data)
    flat = weight.data.reshape(-1)
    nf = n.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = forward().item()
            flat[i] = orig - h
            lo = forward().item()
            flat[i] = orig
            nf[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), DENOM_FLOOR)
    return float(np.max(np.abs(a - n) / denom))
