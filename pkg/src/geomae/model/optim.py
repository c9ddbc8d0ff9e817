"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_LR = 1e-5
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8
DEFAULT_WEIGHT_DECAY = 0.01


@dataclass
class AdamW:
    params: dict
    lr: float = DEFAULT_LR
    betas: tuple = DEFAULT_BETAS
    eps: float = DEFAULT_EPS
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grads: dict | None = None) -> None:
        """Apply one update; a missing gradient counts as zero."""
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = grads.get(name) if grads is not None else p.grad
            g = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64)
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
            v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            w = p.value - self.lr * self.weight_decay * p.value
            p.value = w - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def sgd_adam_step(opt: AdamW, grads: dict | None = None) -> None:
    opt.step(grads)
