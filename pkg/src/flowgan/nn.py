"""Dense feed-forward networks built on the tensor engine."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

_ACTIVATIONS = {"tanh": T.tanh, "relu": T.relu, "sigmoid": T.sigmoid}


class MLP:
    """``widths[0] -> ... -> widths[-1]`` with an activation between layers.

    Weights use a Glorot-normal draw from ``rng``; ``zero_last`` zeroes the
    output layer so the network starts as the constant 0.
    """

    def __init__(
        self,
        widths,
        rng: np.random.Generator,
        activation: str = "tanh",
        zero_last: bool = False,
        zero_all: bool = False,
    ):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        n = len(widths) - 1
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            std = np.sqrt(2.0 / (fan_in + fan_out))
            w = rng.normal(0.0, std, size=(fan_in, fan_out))
            if zero_all or (zero_last and i == n - 1):
                w = np.zeros_like(w)
            self.weights.append(T.parameter(w))
            self.biases.append(T.parameter(np.zeros(fan_out)))

    def __call__(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = T.add(T.matmul(h, w), b)
            if i < last:
                h = act(h)
        return h

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{prefix}w{i}"] = w
            params[f"{prefix}b{i}"] = b
        return params

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))
