"""Parameter-map optimizers for the training loops."""

from __future__ import annotations

import numpy as np

from .params import ParamMap

__all__ = ["Sgd", "Adam", "decayed_step_size"]


class Sgd:
    """Plain (a)scent/(de)scent steps on a ParamMap."""

    def __init__(self, lr: float, maximize: bool = False):
        self.lr = float(lr)
        self.maximize = maximize

    def step(self, params: ParamMap, grads: ParamMap) -> None:
        sign = 1.0 if self.maximize else -1.0
        params.add_scaled(grads, sign * self.lr)


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, maximize: bool = False):
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.maximize = maximize
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: ParamMap, grads: ParamMap) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        sign = 1.0 if self.maximize else -1.0
        for name, p in params.items():
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p += sign * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def decayed_step_size(epoch: int, total_epochs: int, base: float) -> float:
    """Linearly decayed step size (total - e) * base / (total - 50).

    Falls back to a constant when the run is too short for the published
    denominator to make sense (total <= 50).
    """
    if total_epochs <= 50:
        return base
    return max((total_epochs - epoch) * base / (total_epochs - 50), 0.0)
