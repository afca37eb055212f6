"""Adam with the warmup / inverse-square-root ("Transformer") schedule."""

from __future__ import annotations

import math

import numpy as np

from .nn import ParamRegistry


def transformer_lr(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``peak_lr`` then decay proportional to 1/sqrt(step).

    ``step`` counts optimizer updates from 1.
    """
    step = max(step, 1)
    if warmup_steps <= 0:
        return peak_lr
    return peak_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))


class Adam:
    """Adam over the registry's trainable entries only.

    The parameter list is captured at construction; frozen entries never
    enter it, and are skipped again at step time as a second guard.
    """

    def __init__(self, reg: ParamRegistry, lr=1e-3, betas=(0.9, 0.98), eps=1e-9):
        self.reg = reg
        self.params = reg.trainable()
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self.params}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> list[str]:
        """Apply one update; returns the names of tensors that were changed."""
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        updated = []
        for name, p in self.params:
            if p.grad is None or self.reg.is_frozen(name):
                continue
            m, v = self._m[name], self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            updated.append(name)
        return updated
