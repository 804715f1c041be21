"""Plain first-order update rules over lists of numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SGD:
    lr: float

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        return [p - self.lr * g for p, g in zip(params, grads)]


@dataclass
class Adam:
    """Adam with an optional linear decay of the learning rate to zero over ``total_steps``."""

    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    total_steps: int | None = None
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.lr
        return self.lr * max(0.0, 1.0 - self.t / self.total_steps)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        lr = self.current_lr()
        self.t += 1
        b1, b2 = self.betas
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1**self.t)
            vhat = self.v[i] / (1 - b2**self.t)
            out.append(p - lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


def make_optimizer(kind: str, lr: float, total_steps: int | None = None):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr, total_steps=total_steps)
    raise ValueError(f"unknown optimizer {kind!r}")
