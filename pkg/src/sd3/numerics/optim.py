"""AdamW with decoupled weight decay and linear warmup."""
from __future__ import annotations

import numpy as np

from .autodiff import ParamStore


def linear_warmup(base_lr: float, warmup_steps: int, step: int) -> float:
    """Learning rate ramped linearly over the first ``warmup_steps`` updates."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * (step + 1) / warmup_steps


class AdamW:
    """Decoupled-weight-decay Adam over a ``ParamStore``.

    Decay is applied directly to the weights, not mixed into the moment
    estimates, so it behaves like true L2 shrinkage regardless of the
    adaptive step size.
    """

    def __init__(self, store: ParamStore, lr: float, betas=(0.9, 0.98),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 warmup_steps: int = 200):
        self.store = store
        self.base_lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = float(weight_decay)
        self.warmup_steps = int(warmup_steps)
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self):
        self.t += 1
        lr = linear_warmup(self.base_lr, self.warmup_steps, self.t - 1)
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in self.store.names():
            p = self.store[name]
            if p.grad is None:
                continue
            g = p.grad
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self._m[name] = m
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay > 0.0:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * update

    def zero_grad(self):
        self.store.zero_grad()
