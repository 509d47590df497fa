"""Adam optimizer and the linear-warmup + cosine-decay learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class DivergenceError(RuntimeError):
    """A non-finite loss or gradient reached the optimizer."""


class Adam:
    """Standard Adam with bias correction.

    Betas/eps default to (0.9, 0.999, 1e-8) with no weight decay; these are
    conventional choices, not externally mandated.
    """

    def __init__(self, params, base_lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        self.params: list[Tensor] = list(params)
        self.base_lr = float(base_lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        """One update over all parameters; missing grads count as zero."""
        if lr is None:
            lr = self.base_lr
        if lr < 0:
            raise ValueError("lr must be non-negative")
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise DivergenceError("non-finite gradient; step aborted")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else 0.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype, copy=False)


@dataclass(frozen=True)
class LrSchedule:
    """Linear ramp 0 -> base_lr over warmup_epochs, then cosine decay to 0."""

    base_lr: float
    warmup_epochs: float = 5.0
    total_epochs: float = 6.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")
        if self.total_epochs < self.warmup_epochs or self.total_epochs <= 0:
            raise ValueError("total_epochs must be positive and >= warmup_epochs")

    def lr_at(self, progress: float) -> float:
        """Learning rate at fractional epoch progress in [0, total_epochs]."""
        if progress < 0 or progress > self.total_epochs:
            raise ValueError(
                f"progress {progress} outside [0, {self.total_epochs}]"
            )
        if progress < self.warmup_epochs:
            return self.base_lr * progress / self.warmup_epochs
        span = self.total_epochs - self.warmup_epochs
        if span == 0:
            return self.base_lr
        frac = (progress - self.warmup_epochs) / span
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def lr_at(schedule: LrSchedule, progress: float) -> float:
    return schedule.lr_at(progress)
