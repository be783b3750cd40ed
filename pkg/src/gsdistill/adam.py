"""Adam optimizer over named parameter groups (in-place updates)."""

from __future__ import annotations

import numpy as np


class Adam:
    """First/second-moment adaptive steps; beta = (0.9, 0.999), eps 1e-15.

    ``params`` maps group names to the arrays to update in place; frozen
    groups are simply not registered, so they receive exactly zero updates.
    """

    def __init__(self, params: dict[str, np.ndarray], lrs: dict[str, float],
                 betas=(0.9, 0.999), eps: float = 1e-15):
        self.params = params
        self.lrs = dict(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr_scale: dict[str, float] | None = None):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for key, p in self.params.items():
            g = grads[key]
            m = self.m[key]
            v = self.v[key]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            lr = self.lrs[key]
            if lr_scale and key in lr_scale:
                lr = lr * lr_scale[key]
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def select(self, mask: np.ndarray):
        """Keep optimizer state for a row subset (after pruning)."""
        for k in self.params:
            self.m[k] = self.m[k][mask]
            self.v[k] = self.v[k][mask]

    def rebind(self, params: dict[str, np.ndarray]):
        self.params = params
