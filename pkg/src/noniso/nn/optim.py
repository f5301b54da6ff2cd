"""Adam with bias correction and an exponential moving average of the weights."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    rejected: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr=0.005, beta1=0.9, beta2=0.999, eps=1e-8) -> bool:
    """Update ``params`` in place. Returns False (and leaves params alone) on non-finite grads."""
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            state.rejected += 1
            return False
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


class Adam:
    def __init__(self, module, lr=0.005, betas=(0.9, 0.999), eps=1e-8):
        self.module = module
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState()

    def step(self) -> bool:
        return adam_step(self.module.state_dict(), self.module.grad_dict(), self.state,
                         self.lr, self.betas[0], self.betas[1], self.eps)


class EMA:
    """shadow = decay * shadow + (1 - decay) * current, seeded with a copy of the weights."""

    def __init__(self, module, decay=0.98):
        self.decay = decay
        self.shadow = {k: v.copy() for k, v in module.state_dict().items()}

    def update(self, module):
        for k, v in module.state_dict().items():
            s = self.shadow[k]
            s *= self.decay
            s += (1.0 - self.decay) * v

    def copy_to(self, module):
        module.load_state_dict(self.shadow)
