"""AdamW over named parameter dicts."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    """Decoupled-weight-decay Adam.

    Holds the full optimizer state: per-parameter first/second moment
    buffers (shape-matched to their parameters), a step counter, and the
    hyperparameters. ``step`` requires every parameter to carry a gradient
    buffer; call ``zero_grad`` (which creates zeroed buffers) before the
    backward passes of a step, mirroring ``optimizer.zero_grad()``.
    """

    def __init__(self, params, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params: dict[str, Tensor] = dict(params)
        if not self.params:
            raise ValueError("AdamW requires at least one parameter")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter '{name}' has no gradient; backward/zero_grad must run before step")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * update
