"""Adam with the inverse-square-root warmup schedule."""

from __future__ import annotations

import numpy as np

from .errors import NumericalAbort
from .params import ParamStore


def inverse_sqrt_lr(step: int, d_model: int, warmup_steps: int,
                    scale: float = 1.0) -> float:
    """Linear warmup to step `warmup_steps`, then decay as 1/sqrt(step)."""
    step = max(1, int(step))
    return scale * d_model ** -0.5 * min(step ** -0.5,
                                         step * warmup_steps ** -1.5)


class Adam:
    """Adam over a ParamStore. Moments live here, keyed by parameter name.

    A parameter whose .grad is None is treated as having a zero gradient,
    which still decays its moments; with fresh moments the update is exactly
    zero, so untouched parameters stay put.
    """

    def __init__(self, params: ParamStore, beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif np.isnan(g).any():
                raise NumericalAbort(f"NaN gradient in parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype, copy=False)
