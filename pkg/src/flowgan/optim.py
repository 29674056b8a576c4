"""Adam with bias correction, operating in place on parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError
from .tensor import Tensor


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], 0)

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.t)


def adam_step(params, grads, state: AdamState, lr: float, beta1: float, beta2: float, eps: float) -> AdamState:
    """One bias-corrected Adam update. Parameters are replaced, not mutated."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state disagree in length")
    garrs = [g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64) for g in grads]
    for i, g in enumerate(garrs):
        if g.shape != params[i].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[i].shape}")
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter {i}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, garrs, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state
