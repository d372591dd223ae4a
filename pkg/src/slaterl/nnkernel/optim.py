"""Adaptive-moment (Adam) optimizer with bias correction."""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam over a fixed, ordered set of named parameters.

    ``step()`` requires every owned parameter to carry a gradient, applies the
    bias-corrected update, and clears the gradients it consumed.
    """

    def __init__(self, params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]],
                 lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params: dict[str, Tensor] = dict(params)
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.moment1 = {n: np.zeros_like(p.values) for n, p in self.params.items()}
        self.moment2 = {n: np.zeros_like(p.values) for n, p in self.params.items()}

    def step(self) -> None:
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise ValueError(f"missing gradients for parameters: {missing[:5]}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            m = self.moment1[name]
            v = self.moment2[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
