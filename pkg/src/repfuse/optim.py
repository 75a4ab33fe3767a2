"""SGD with momentum and Adam over lists of leaf tensors.

Parameters whose ``grad`` is None are skipped entirely for the step: no
momentum, no decay, no moment update. Pruned branches rely on this.
"""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .tensor import Tensor


class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            d = p.grad
            if self.weight_decay:
                d = d + self.weight_decay * p.data
            if self.momentum:
                buf = self._buf.get(id(p))
                if buf is None:
                    buf = self._buf[id(p)] = d.astype(p.data.dtype, copy=True)
                else:
                    buf *= self.momentum
                    buf += d
                d = buf
            p.data -= (self.lr * d).astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: self._buf[id(p)] for p in self.params if id(p) in self._buf}


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, betas=(0.5, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t: dict[int, int] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            key = id(p)
            g = p.grad.astype(np.float64)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self._m.get(key, np.zeros_like(g))
            v = self._v.get(key, np.zeros_like(g))
            t = self._t.get(key, 0) + 1
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self._m[key], self._v[key], self._t[key] = m, v, t
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def sgd_step(params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0, state: SGD | None = None) -> SGD:
    """One SGD update; pass the returned optimizer back in to keep momentum."""
    opt = state or SGD(params, lr, momentum, weight_decay)
    opt.lr = lr
    opt.step()
    return opt


def adam_step(params, lr: float, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8,
              state: Adam | None = None) -> Adam:
    opt = state or Adam(params, lr, (beta1, beta2), eps)
    opt.lr = lr
    opt.step()
    return opt


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1 + math.cos(math.pi * min(step, total_steps) / total_steps))
