"""SGD-with-momentum and Adam, plus the plateau learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    variant: str = "sgd"  # "sgd" | "adam"
    lr: float = 0.1
    momentum: float = 0.9
    betas: tuple[float, float] = (0.5, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    buffers: list[list[np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if self.variant not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer variant {self.variant!r}")


def optimizer_step(state: OptimizerState, params: list[Tensor], grads: list[np.ndarray | None]) -> None:
    """Update ``params`` in place and advance the moment buffers.

    SGD keeps one buffer (velocity) per parameter, Adam two (first and second
    moments, bias-corrected). Weight decay is added to the gradient (L2).
    """
    if not state.buffers:
        n = 1 if state.variant == "sgd" else 2
        state.buffers = [[np.zeros_like(p.data) for p in params] for _ in range(n)]
    state.step_count += 1
    lr, wd = state.lr, state.weight_decay
    if state.variant == "sgd":
        (vel,) = state.buffers
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            g = np.asarray(g, dtype=p.dtype)
            if wd:
                g = g + wd * p.data
            if state.momentum:
                vel[i] = state.momentum * vel[i] + g
                g = vel[i]
            p.data = (p.data - lr * g).astype(p.dtype, copy=False)
        return
    m, v = state.buffers
    b1, b2 = state.betas
    t = state.step_count
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        g = np.asarray(g, dtype=p.dtype)
        if wd:
            g = g + wd * p.data
        m[i] = b1 * m[i] + (1 - b1) * g
        v[i] = b2 * v[i] + (1 - b2) * (g * g)
        upd = lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + state.eps)
        p.data = (p.data - upd).astype(p.dtype, copy=False)


class Optimizer:
    """Binds an :class:`OptimizerState` to a parameter list and reads ``p.grad``."""

    def __init__(self, params: list[Tensor], state: OptimizerState):
        self.params = list(params)
        self.state = state

    def step(self) -> None:
        optimizer_step(self.state, self.params, [p.grad for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd(params, lr=0.1, momentum=0.9, weight_decay=0.0) -> Optimizer:
    return Optimizer(params, OptimizerState("sgd", lr=lr, momentum=momentum, weight_decay=weight_decay))


def adam(params, lr=2e-4, betas=(0.5, 0.999), weight_decay=0.0) -> Optimizer:
    return Optimizer(params, OptimizerState("adam", lr=lr, betas=tuple(betas), weight_decay=weight_decay))


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, state: OptimizerState, factor: float = 0.1, patience: int = 10):
        self.state = state
        self.factor = factor
        self.patience = patience
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.state.lr *= self.factor
            self.bad_epochs = 0
            return True
        return False
