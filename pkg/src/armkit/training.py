"""Optimizers and the minibatch training loop shared by the estimator and experiments."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, backward

logger = logging.getLogger(__name__)


class AdamW:
    """Adam with decoupled weight decay; decay only touches tensors with ndim >= 2."""

    def __init__(self, params: list[Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.params = params
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            data = p.data
            if self.weight_decay and p.ndim >= 2:
                data = data * (1 - self.lr * self.weight_decay)
            p.data = data - self.lr * update


class SGD:
    def __init__(self, params: list[Tensor], lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.buf = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.ndim >= 2:
                g = g + self.weight_decay * p.data
            self.buf[i] = self.momentum * self.buf[i] + g
            p.data = p.data - self.lr * self.buf[i]


def make_optimizer(name: str, params: list[Tensor], lr: float, weight_decay: float, momentum: float = 0.9):
    if name == "adamw":
        return AdamW(params, lr=lr, weight_decay=weight_decay)
    if name == "sgd":
        return SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}; expected 'adamw' or 'sgd'")


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")
        self.epoch, self.step, self.loss = epoch, step, loss


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_accuracy: float
    wall_ms: float
    eval: dict[str, tuple[float, float]] = field(default_factory=dict)


def run_epochs(
    loss_fn: Callable[[np.ndarray, np.ndarray], tuple[Tensor, np.ndarray]],
    params: list[Tensor],
    X: np.ndarray,
    y: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    optimizer,
    rng: np.random.Generator,
    on_epoch: Callable[[int], dict[str, tuple[float, float]]] | None = None,
) -> list[EpochLog]:
    """Shuffled minibatch loop. ``loss_fn(xb, yb)`` returns (loss, logits).

    Raises :class:`DivergenceError` as soon as a batch loss is not finite.
    """
    logs = []
    n = len(X)
    for epoch in range(epochs):
        start = time.perf_counter()
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for step, lo in enumerate(range(0, n, batch_size)):
            idx = order[lo : lo + batch_size]
            for p in params:
                p.grad = None
            loss, logits = loss_fn(X[idx], y[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(epoch, step, value)
            backward(loss)
            optimizer.step()
            total_loss += value * len(idx)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
        log = EpochLog(epoch, total_loss / n, correct / n, 1000 * (time.perf_counter() - start))
        if on_epoch is not None:
            log.eval = on_epoch(epoch)
        logger.debug("epoch %d loss %.4f acc %.3f", epoch, log.train_loss, log.train_accuracy)
        logs.append(log)
    return logs
