"""Optimizers and learning-rate schedules over named parameter dicts."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import Tensor


def grad_norm(params: Mapping[str, Tensor]) -> float:
    return math.sqrt(sum(float((p.grad**2).sum()) for p in params.values() if p.grad is not None))


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    total = grad_norm(params)
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


class AdamW:
    """Adam with decoupled weight decay (PyTorch defaults for betas and eps)."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, weight_decay: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            p.data *= 1 - self.lr * self.weight_decay
            self.m[k] = b1 * self.m[k] + (1 - b1) * p.grad
            self.v[k] = b2 * self.v[k] + (1 - b2) * p.grad**2
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-2, momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        self.params = params
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.buf = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            self.buf[k] = self.momentum * self.buf[k] + g
            p.data -= self.lr * self.buf[k]


def cosine_lr(base_lr: float, step: int, total_steps: int, eta_min: float = 0.0) -> float:
    """Cosine annealing from base_lr at step 0 to eta_min at total_steps."""
    if total_steps <= 0:
        return base_lr
    return eta_min + (base_lr - eta_min) * (1 + math.cos(math.pi * min(step, total_steps) / total_steps)) / 2


@dataclass(frozen=True)
class StepSchedule:
    """Divide the rate by ``divisor`` after each listed (1-based) epoch completes."""

    base_lr: float = 1e-2
    milestones: tuple[int, ...] = (15, 19)
    divisor: float = 10.0

    def lr_at_epoch(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if epoch > m)
        return self.base_lr / self.divisor**passed
