"""Adam optimizer and the triangular cyclic learning-rate schedule."""

from __future__ import annotations

import numpy as np


class Adam:
    """Standard Adam with bias correction. Deterministic given a fixed
    gradient sequence; state is exportable for bitwise-exact resume."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            p.data -= lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    # checkpoint support ---------------------------------------------------
    def state_arrays(self):
        out = {"adam.t": np.array([self.t], dtype=np.int64)}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"adam.m.{p.name}"] = m
            out[f"adam.v.{p.name}"] = v
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["adam.t"][0])
        for i, p in enumerate(self.params):
            self.m[i] = arrays[f"adam.m.{p.name}"].astype(p.data.dtype).copy()
            self.v[i] = arrays[f"adam.v.{p.name}"].astype(p.data.dtype).copy()


def triangular_lr(step, base_lr, max_lr, half_cycle_steps):
    """Triangular cyclic schedule: rises linearly base->max over
    half_cycle_steps optimizer steps, then falls back, repeating."""
    if half_cycle_steps < 1:
        raise ValueError(f"half_cycle_steps must be >= 1, got {half_cycle_steps}")
    cycle = np.floor(1.0 + step / (2.0 * half_cycle_steps))
    x = np.abs(step / half_cycle_steps - 2.0 * cycle + 1.0)
    return float(base_lr + (max_lr - base_lr) * max(0.0, 1.0 - x))
