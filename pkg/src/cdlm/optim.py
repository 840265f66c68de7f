"""SGD with momentum and Adam over named numpy parameter dicts."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class SGDMomentum:
    """Heavy-ball SGD: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            v = self.velocity[n]
            v *= self.momentum
            v += grads[n]
            p.data -= (self.lr * v).astype(p.dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {f"v/{n}": v for n, v in self.velocity.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for n in self.velocity:
            self.velocity[n] = np.array(arrays[f"v/{n}"], copy=True)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, p in self.params.items():
            g = grads[n]
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m/{n}": a for n, a in self.m.items()}
        out.update({f"v/{n}": a for n, a in self.v.items()})
        out["t"] = np.array([self.t], dtype=np.float64)
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for n in self.m:
            self.m[n] = np.array(arrays[f"m/{n}"], copy=True)
            self.v[n] = np.array(arrays[f"v/{n}"], copy=True)
        self.t = int(arrays["t"][0])
