"""Invertible coupling-flow generators with exact log-likelihood.

Layers are stored in generative order: ``generate`` applies them first to
last (latent -> data), ``invert`` applies their inverses last to first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DivergenceError
from .nn import MLP
from .tensor import NonFiniteError, Tensor

LOG_2PI = math.log(2.0 * math.pi)

PRIOR_KINDS = ("gaussian", "logistic")
COUPLING_KINDS = ("additive", "affine")


@dataclass(frozen=True)
class Prior:
    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"unknown prior {self.kind!r}")
        if self.dim < 1:
            raise ValueError("prior dimension must be positive")

    def logpdf(self, z) -> Tensor:
        return prior_logpdf(self, z)

    def logpdf_array(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "gaussian":
            return -0.5 * np.sum(z * z, axis=1) - 0.5 * self.dim * LOG_2PI
        return -np.sum(np.logaddexp(0.0, z) + np.logaddexp(0.0, -z), axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.standard_normal((n, self.dim))
        u = rng.random((n, self.dim))
        # u == 0 has probability ~2^-53 per draw but would give -inf
        u = np.clip(u, 1e-300, None)
        return np.log(u) - np.log1p(-u)


def prior_logpdf(prior: Prior, z) -> Tensor:
    """Per-row log-density of the prior, summed over dimensions."""
    z = T._wrap(z)
    if z.ndim != 2 or z.shape[1] != prior.dim:
        raise T.ShapeError(f"prior expects [batch, {prior.dim}], got {z.shape}")
    if prior.kind == "gaussian":
        return T.sub(T.mul(-0.5, T.sum_(T.square(z), 1)), 0.5 * prior.dim * LOG_2PI)
    # -z - 2 log(1 + e^-z) == -softplus(z) - softplus(-z)
    return T.neg(T.sum_(T.add(T.softplus(z), T.softplus(T.neg(z))), 1))


class ScaleLayer:
    """Elementwise ``x = z * exp(log_diag)``."""

    def __init__(self, log_diag):
        self.log_diag = T.parameter(np.array(log_diag, dtype=np.float64).reshape(-1))
        self.dim = self.log_diag.shape[0]

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        x = T.mul(z, T.exp(self.log_diag))
        ld = T.broadcast(T.sum_(self.log_diag), (z.shape[0],))
        return x, ld

    def inverse(self, x: Tensor) -> tuple[Tensor, Tensor]:
        z = T.mul(x, T.exp(T.neg(self.log_diag)))
        ld = T.broadcast(T.neg(T.sum_(self.log_diag)), (x.shape[0],))
        return z, ld

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}log_diag": self.log_diag}


class CouplingLayer:
    """Coupling on contiguous halves.

    ``mask[i] == 1`` marks coordinates passed through unchanged; the rest are
    shifted (additive) or scaled and shifted (affine) by a conditioner of the
    passed-through ones. Affine log-scales are squashed to
    ``(-log_scale_clamp, log_scale_clamp)`` by ``clamp * tanh(raw / clamp)``.
    """

    def __init__(
        self,
        kind: str,
        mask,
        hidden=(64, 64),
        rng: np.random.Generator | None = None,
        log_scale_clamp: float = 5.0,
    ):
        if kind not in COUPLING_KINDS:
            raise ValueError(f"unknown coupling kind {kind!r}")
        mask = np.asarray(mask, dtype=np.int64)
        if mask.ndim != 1 or set(np.unique(mask)) != {0, 1}:
            raise ValueError("mask needs at least one 0 and one 1 entry")
        if log_scale_clamp <= 0:
            raise ValueError("log_scale_clamp must be positive")
        edges = np.flatnonzero(np.diff(mask))
        if len(edges) != 1:
            raise ValueError("mask must select one contiguous block")
        self.kind = kind
        self.mask = mask
        self.dim = len(mask)
        self.clamp = float(log_scale_clamp)
        self.split = int(edges[0]) + 1
        self.pass_first = bool(mask[0])
        n_pass = int(mask.sum())
        n_change = self.dim - n_pass
        n_out = n_change if kind == "additive" else 2 * n_change
        rng = rng if rng is not None else np.random.default_rng(0)
        self.net = MLP([n_pass, *hidden, n_out], rng, activation="tanh", zero_last=True)
        self._n_change = n_change

    def _split(self, x: Tensor) -> tuple[Tensor, Tensor]:
        head = T.slice_(x, 0, self.split)
        tail = T.slice_(x, self.split, self.dim)
        return (head, tail) if self.pass_first else (tail, head)

    def _join(self, kept: Tensor, changed: Tensor) -> Tensor:
        parts = (kept, changed) if self.pass_first else (changed, kept)
        return T.concat(parts, axis=1)

    def _shift_scale(self, kept: Tensor) -> tuple[Tensor, Tensor | None]:
        out = self.net(kept)
        if self.kind == "additive":
            return out, None
        k = self._n_change
        raw = T.slice_(out, 0, k)
        shift = T.slice_(out, k, 2 * k)
        log_s = T.mul(self.clamp, T.tanh(T.mul(raw, 1.0 / self.clamp)))
        return shift, log_s

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        kept, change = self._split(z)
        shift, log_s = self._shift_scale(kept)
        if log_s is None:
            return self._join(kept, T.add(change, shift)), Tensor(np.zeros(z.shape[0]))
        y = T.add(T.mul(change, T.exp(log_s)), shift)
        return self._join(kept, y), T.sum_(log_s, 1)

    def inverse(self, x: Tensor) -> tuple[Tensor, Tensor]:
        kept, change = self._split(x)
        shift, log_s = self._shift_scale(kept)
        if log_s is None:
            return self._join(kept, T.sub(change, shift)), Tensor(np.zeros(x.shape[0]))
        y = T.mul(T.sub(change, shift), T.exp(T.neg(log_s)))
        return self._join(kept, y), T.neg(T.sum_(log_s, 1))

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return self.net.parameters(prefix + "net.")


class FlowModel:
    def __init__(self, layers, prior: Prior):
        self.layers = list(layers)
        self.prior = prior
        self.dim = prior.dim
        for layer in self.layers:
            if layer.dim != self.dim:
                raise ValueError("layer width differs from prior dimension")

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, layer in enumerate(self.layers):
            params.update(layer.parameters(f"layers.{i}."))
        return params

    def _check_input(self, x) -> Tensor:
        x = T._wrap(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise T.ShapeError(f"expected [batch, {self.dim}], got {x.shape}")
        if not np.isfinite(x.data).all():
            raise ValueError("input contains non-finite values")
        return x

    def generate(self, z) -> tuple[Tensor, Tensor]:
        return generate(self, z)

    def invert(self, x) -> tuple[Tensor, Tensor]:
        return invert(self, x)

    def log_likelihood(self, x) -> Tensor:
        return log_likelihood(self, x)

    def sample(self, n: int, seed) -> np.ndarray:
        return sample(self, n, seed)

    def generate_array(self, z: np.ndarray) -> np.ndarray:
        """Untracked forward map on a plain array."""
        with T.no_record():
            x, _ = generate(self, Tensor(z))
        return x.data


def build_flow(
    dim: int,
    n_layers: int,
    kind: str = "affine",
    conditioner_widths=(64, 64),
    mask_scheme: str = "halves",
    prior_kind: str = "gaussian",
    seed: int = 0,
    log_scale_clamp: float = 5.0,
    scale_layer: bool = True,
) -> FlowModel:
    """Stack ``n_layers`` couplings with alternating half masks.

    A :class:`ScaleLayer` (log_diag = 0) sits next to the latent when
    ``scale_layer`` is set; with zeroed conditioner outputs the whole map
    starts as the identity.
    """
    if dim < 2 and n_layers > 0:
        raise ValueError("coupling layers need dim >= 2")
    if n_layers < 0:
        raise ValueError("n_layers must be non-negative")
    if n_layers == 0 and not scale_layer:
        raise ValueError("a flow needs at least one layer")
    if mask_scheme != "halves":
        raise ValueError(f"unknown mask scheme {mask_scheme!r}")
    rng = np.random.default_rng(seed)
    half = dim // 2
    first = np.array([1] * half + [0] * (dim - half))
    layers: list = []
    if scale_layer:
        layers.append(ScaleLayer(np.zeros(dim)))
    for i in range(n_layers):
        mask = first if i % 2 == 0 else 1 - first
        layers.append(CouplingLayer(kind, mask, conditioner_widths, rng, log_scale_clamp))
    return FlowModel(layers, Prior(prior_kind, dim))


def _run(model: FlowModel, x: Tensor, layers, method: str, what: str) -> tuple[Tensor, Tensor]:
    total = None
    for index, layer in layers:
        try:
            x, ld = getattr(layer, method)(x)
        except NonFiniteError as err:
            raise DivergenceError(f"non-finite value in {what}", layer=index) from err
        total = ld if total is None else T.add(total, ld)
    if total is None:
        total = Tensor(np.zeros(x.shape[0]))
    return x, total


def generate(model: FlowModel, z) -> tuple[Tensor, Tensor]:
    """x = G(z) and log|det dG/dz| per row."""
    z = model._check_input(z)
    return _run(model, z, list(enumerate(model.layers)), "forward", "generate")


def invert(model: FlowModel, x) -> tuple[Tensor, Tensor]:
    """z = f(x) = G^{-1}(x) and log|det df/dx| per row."""
    x = model._check_input(x)
    return _run(model, x, list(enumerate(model.layers))[::-1], "inverse", "invert")


def log_likelihood(model: FlowModel, x) -> Tensor:
    """Exact log p(x) in nats via change of variables."""
    z, ld = invert(model, x)
    try:
        return T.add(prior_logpdf(model.prior, z), ld)
    except NonFiniteError as err:
        raise DivergenceError("non-finite log-likelihood", layer=len(model.layers)) from err


def sample(model: FlowModel, n: int, seed) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = model.prior.sample(n, rng)
    return model.generate_array(z)
