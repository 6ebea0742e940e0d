"""Gradient-descent optimizers and the basic supervised training step."""

from __future__ import annotations

import numpy as np

from .layers import Network
from .tensor import Tensor, bce_loss, mse_loss


class TrainingError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


class SGD:
    """Plain stochastic gradient descent bound to a fixed parameter list."""

    kind = "sgd"

    def __init__(self, params: list[Tensor], lr: float):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.step_count = 0

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad
        self.step_count += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Adam:
    """Adam with bias correction; moment buffers shape-match the bound parameters."""

    kind = "adam"

    def __init__(
        self,
        params: list[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1**t)
            v_hat = self.v[i] / (1 - self.beta2**t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


Optimizer = SGD | Adam

LOSSES = {"mse": mse_loss, "bce": bce_loss}


def train_step(net: Network, optimizer: Optimizer, batch, loss: str = "mse") -> float:
    """One full-batch gradient step; returns the pre-update mean loss.

    ``batch`` is an (inputs, targets) pair.  A non-finite loss raises
    :class:`TrainingError` carrying the optimizer's step index.
    """
    inputs, targets = batch
    loss_fn = LOSSES[loss]
    optimizer.zero_grad()
    out = net.forward(inputs)
    value = loss_fn(out, np.asarray(targets, dtype=np.float64))
    scalar = value.item()
    if not np.isfinite(scalar):
        raise TrainingError(optimizer.step_count, scalar)
    value.backward()
    optimizer.step()
    return scalar
