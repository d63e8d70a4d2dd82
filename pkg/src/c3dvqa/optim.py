"""Adam optimizer and plateau learning-rate decay."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"parameter {i} of shape {p.shape} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad.astype(np.float64)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype)
        self.zero_grad()


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` stagnant epochs.

    An epoch improves only when its loss beats the best so far by more than
    ``rel_tol`` (relative).  The stagnation counter resets on every decay.
    """

    def __init__(self, optimizer: Adam | None = None, lr: float | None = None,
                 factor: float = 0.9, patience: int = 5, rel_tol: float = 1e-6):
        if optimizer is None and lr is None:
            raise ValueError("need an optimizer or an initial learning rate")
        self.optimizer = optimizer
        self.lr = float(optimizer.lr if optimizer is not None else lr)
        self.factor = factor
        self.patience = patience
        self.rel_tol = rel_tol
        self.best = math.inf
        self.counter = 0

    def step(self, epoch_loss: float) -> float:
        if not math.isfinite(epoch_loss):
            raise FloatingPointError(f"non-finite epoch loss {epoch_loss}")
        improved = not math.isfinite(self.best) or epoch_loss < self.best - self.rel_tol * abs(self.best)
        if improved:
            self.best = epoch_loss
            self.counter = 0
        else:
            self.counter += 1
            if self.counter >= self.patience:
                self.lr *= self.factor
                self.counter = 0
        if self.optimizer is not None:
            self.optimizer.lr = self.lr
        return self.lr
