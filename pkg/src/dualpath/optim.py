"""Decoupled-weight-decay adaptive-moment optimizer with cosine schedule.

Updates run in sorted parameter-name order, single-threaded, so training is
bitwise reproducible for a fixed seed.
"""

from __future__ import annotations

import numpy as np

__all__ = ["AdamW", "cosine_lr"]


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Half-cosine decay from base_lr to 0 over total_steps."""
    t = min(max(step, 0), total_steps)
    return float(base_lr * 0.5 * (1.0 + np.cos(np.pi * t / total_steps)))


class AdamW:
    """Standard bias-corrected Adam with decoupled weight decay."""

    def __init__(self, params: dict, lr=3e-4, weight_decay=5e-2,
                 betas=(0.9, 0.999), eps=1e-8):
        self.names = sorted(params)
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def zero_grad(self):
        for n in self.names:
            self.params[n].zero_grad()

    def step(self, lr_now: float | None = None):
        lr = self.lr if lr_now is None else lr_now
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n in self.names:
            p = self.params[n]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[n] = self.b1 * self.m[n] + (1.0 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1.0 - self.b2) * (g * g)
            mhat = self.m[n] / c1
            vhat = self.v[n] / c2
            update = mhat / (np.sqrt(vhat) + self.eps) \
                + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(np.float32)
