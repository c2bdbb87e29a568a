"""Adam with optional stepwise learning-rate decay."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ContractViolation


class Adam:
    """Adam over a fixed list of parameters.

    The effective learning rate for a call to :meth:`step` is

        lr * decay_factor ** floor(step_count / decay_every)

    evaluated with the step counter *before* it is incremented, so the first
    ``decay_every`` steps run at the base rate. ``decay_every=None`` disables
    decay. Moment buffers live as long as the optimizer, which lets a caller
    keep one instance across many short optimization bursts.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        decay_factor: float = 1.0,
        decay_every: int | None = None,
    ):
        self.params = list(params)
        if not self.params:
            raise ContractViolation("Adam needs at least one parameter")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def effective_lr(self) -> float:
        if self.decay_every is None:
            return self.lr
        return self.lr * self.decay_factor ** (self.step_count // self.decay_every)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        """Apply one update using each parameter's accumulated gradient.

        Parameters whose ``grad`` is None are skipped (they did not take part
        in the last forward pass).
        """
        lr_t = self.effective_lr()
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr_t * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
