"""Optimizers over Tensor parameters.

State is keyed by parameter identity and created lazily, so parameters
that appear mid-run (freshly spawned modules) join seamlessly. Frozen
parameters are excluded by the caller; as a second guard, anything with
``requires_grad == False`` or no gradient is skipped and never mutated.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam with bias correction; per-parameter step counters."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._state: dict[int, dict] = {}

    def step(self, params: Iterable[Tensor]) -> None:
        for p in params:
            if not p.requires_grad or p.grad is None:
                continue
            st = self._state.get(id(p))
            if st is None:
                st = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
                self._state[id(p)] = st
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * p.grad
            st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * p.grad**2
            m_hat = st["m"] / (1 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1 - self.beta2 ** st["t"])
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self, params: Iterable[Tensor]) -> None:
        for p in params:
            p.grad = None


class SGD:
    """Plain SGD with optional momentum."""

    def __init__(self, lr: float = 1e-2, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict[int, np.ndarray] = {}

    def step(self, params: Iterable[Tensor]) -> None:
        for p in params:
            if not p.requires_grad or p.grad is None:
                continue
            if self.momentum:
                v = self._velocity.get(id(p))
                v = p.grad.copy() if v is None else self.momentum * v + p.grad
                self._velocity[id(p)] = v
                p.data -= self.lr * v
            else:
                p.data -= self.lr * p.grad

    def zero_grad(self, params: Iterable[Tensor]) -> None:
        for p in params:
            p.grad = None


def make_optimizer(name: str, lr: float, **kwargs):
    if name == "adam":
        return Adam(lr=lr, **kwargs)
    if name == "sgd":
        return SGD(lr=lr, **kwargs)
    raise ValueError(f"unknown optimizer {name!r}")
