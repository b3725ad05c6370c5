"""SGD with momentum and milestone decay, plus Adam for the auxiliary net.

Optimizers never mutate gradient buffers in place; after a step every
parameter's grad is reset to None.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class Sgd:
    """v <- momentum*v + g;  p <- p - lr(epoch)*v.

    ``milestones`` is a list of (epoch, multiplier) pairs; the effective
    learning rate at epoch e is ``lr * prod(mult for (m, mult) if m <= e)``.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0,
                 milestones: list[tuple[int, float]] | None = None):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"momentum must be in [0, 1), got {momentum}")
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.milestones = sorted(tuple(m) for m in (milestones or []))
        self._velocity = {name: None for name in self.params}

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for m, mult in self.milestones:
            if m <= epoch:
                lr *= mult
        return lr

    def step(self, epoch: int) -> None:
        lr = self.lr_at(epoch)
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"sgd step: parameter {name!r} has no gradient")
            dt = p.data.dtype
            g = p.grad
            v = self._velocity[name]
            v = g if (v is None or self.momentum == 0.0) else self.momentum * v + g
            self._velocity[name] = v
            p.data -= dt.type(lr) * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"v.{n}": (v.copy() if v is not None else np.zeros_like(self.params[n].data))
                for n, v in self._velocity.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n in self.params:
            self._velocity[n] = np.asarray(arrays[f"v.{n}"], dtype=self.params[n].data.dtype)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = {n: None for n in self.params}
        self._v = {n: None for n in self.params}

    def step(self, epoch: int | None = None) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"adam step: parameter {name!r} has no gradient")
            g = p.grad
            m = g * (1 - b1) if self._m[name] is None else b1 * self._m[name] + (1 - b1) * g
            v = (g * g) * (1 - b2) if self._v[name] is None else b2 * self._v[name] + (1 - b2) * (g * g)
            self._m[name] = m
            self._v[name] = v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype, copy=False)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.asarray([self.t], dtype=np.float32)}
        for n in self.params:
            out[f"m.{n}"] = self._m[n].copy() if self._m[n] is not None else np.zeros_like(self.params[n].data)
            out[f"v.{n}"] = self._v[n].copy() if self._v[n] is not None else np.zeros_like(self.params[n].data)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        for n in self.params:
            self._m[n] = np.asarray(arrays[f"m.{n}"], dtype=self.params[n].data.dtype)
            self._v[n] = np.asarray(arrays[f"v.{n}"], dtype=self.params[n].data.dtype)
