"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float | None = None

    @property
    def passed(self) -> bool:
        return self.tol is None or self.max_rel_error < self.tol


def numerical_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of scalar ``f`` around ``x`` (evaluated in float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(x)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(x)).data)
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` with a floor of 1e-3 of the largest gradient.

    The floor stops coordinates whose true derivative is ~0 from dominating the
    report through truncation noise.
    """
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)))
    floor = max(1e-3 * scale, 1e-12)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-3, tol: float | None = None) -> GradCheckReport:
    """Compare the tape gradient of ``f`` at ``x`` with central differences.

    Both routes run in float64: float32 round-off alone would swamp the
    comparison at ``h = 1e-3``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x64 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x64, requires_grad=True)
    out = f(xt)
    if out.requires_grad:
        out.backward()
        analytic = xt.grad if xt.grad is not None else np.zeros_like(x64)
    else:
        analytic = np.zeros_like(x64)
    numeric = numerical_grad(f, x64, h)
    if not np.any(analytic) and not np.any(numeric):
        return GradCheckReport(0.0, None, analytic, numeric, tol)
    err = relative_error(analytic, numeric)
    worst = np.unravel_index(int(np.argmax(err)), err.shape)
    return GradCheckReport(float(err.max()), tuple(int(i) for i in worst), analytic, numeric, tol)
