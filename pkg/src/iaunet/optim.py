"""Adam optimizer with bias correction."""
from __future__ import annotations

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor


class Adam:
    """Standard Adam over a named set of parameters.

    Keeps first/second moment buffers per parameter plus one step
    counter. ``step`` consumes and zeroes the accumulated gradients, so
    callers zero-initialize (``zero_grad``) before each forward pass and
    the accumulate-then-step contract stays explicit.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 0.00035,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        """One bias-corrected update; requires every gradient present."""
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractViolation(f"Adam.step: missing gradients for {missing[:3]}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            g = p.grad
            m = self._m[k]
            v = self._v[k]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
            p.grad = np.zeros_like(p.data)
