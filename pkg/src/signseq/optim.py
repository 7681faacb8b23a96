"""Adam with the inverse-square-root warmup schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def learning_rate(step: int, peak: float = 6.8e-4, warmup: int = 4000) -> float:
    """Linear warmup to `peak` at `step == warmup`, then decay by sqrt(warmup/step)."""
    if step <= 0:
        return 0.0
    return peak * min(step / warmup, np.sqrt(warmup / step))


class Adam:
    """Adam over a named parameter dict; moments keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], peak_lr: float = 6.8e-4, warmup: int = 4000,
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = dict(params)
        self.peak_lr = peak_lr
        self.warmup = warmup
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        """One update from the accumulated gradients; returns the lr used."""
        self.step_count += 1
        lr = learning_rate(self.step_count, self.peak_lr, self.warmup)
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
        return lr

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step"])
        for k in self.m:
            self.m[k] = np.array(state["m"][k])
            self.v[k] = np.array(state["v"][k])
