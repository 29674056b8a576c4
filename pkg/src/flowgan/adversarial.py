"""Critic network and the Wasserstein / Jensen-Shannon adversarial losses."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DivergenceError
from .nn import MLP
from .tensor import NonFiniteError, Tensor

DIVERGENCES = ("wgan", "jsd")
PROB_EPS = 1e-7
# below this squared gradient norm the penalty switches to (|g|^2 - 1)^2
ZERO_GRAD_SQ = 1e-12


@dataclass(frozen=True)
class DivergenceSpec:
    kind: str = "wgan"
    penalty_coeff: float = 10.0
    n_critic: int = 5

    def __post_init__(self):
        if self.kind not in DIVERGENCES:
            raise ValueError(f"unknown divergence {self.kind!r}")
        if self.penalty_coeff < 0:
            raise ValueError("penalty_coeff must be >= 0")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")


class Critic:
    """Dense tanh network ``R^d -> R``.

    For ``divergence="jsd"`` the output is squashed by a sigmoid and clamped
    to ``[1e-7, 1 - 1e-7]``.
    """

    def __init__(
        self,
        dim: int,
        hidden=(64, 64),
        divergence: str = "wgan",
        seed: int = 0,
        zero_init: bool = False,
    ):
        if divergence not in DIVERGENCES:
            raise ValueError(f"unknown divergence {divergence!r}")
        self.dim = dim
        self.divergence = divergence
        self.layer_widths = [dim, *hidden, 1]
        self.net = MLP(self.layer_widths, np.random.default_rng(seed), "tanh", zero_all=zero_init)

    def parameters(self) -> dict[str, Tensor]:
        return self.net.parameters("critic.")

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def __call__(self, x) -> Tensor:
        return critic_value(self, x)


def critic_value(critic: Critic, x) -> Tensor:
    x = T._wrap(x)
    if x.ndim != 2 or x.shape[1] != critic.dim:
        raise T.ShapeError(f"critic expects [batch, {critic.dim}], got {x.shape}")
    out = T.reshape(critic.net(x), (x.shape[0],))
    if critic.divergence == "jsd":
        out = T.clip(T.sigmoid(out), PROB_EPS, 1.0 - PROB_EPS)
    return out


def _active_tape():
    tape = T._current_tape()
    return contextlib.nullcontext(tape) if tape is not None else T.Tape()


def gradient_penalty(critic: Critic, x_hat: np.ndarray) -> Tensor:
    """Mean over rows of (||grad_x D(x_hat)|| - 1)^2, recorded for double backward.

    Rows whose input gradient vanishes use (||g||^2 - 1)^2 instead, which has
    the same value at g = 0 and no 1/||g|| factor in its derivative.
    """
    with _active_tape():
        xh = T.parameter(np.asarray(x_hat, dtype=np.float64))
        out = T.sum_(critic_value(critic, xh))
        (g,) = T.grad(out, [xh], create_graph=True)
        sq = T.sum_(T.square(g), 1)
        mask = (sq.data > ZERO_GRAD_SQ).astype(np.float64)
        safe = T.add(T.mul(sq, mask), 1.0 - mask)
        norm_term = T.square(T.sub(T.sqrt(safe), 1.0))
        sq_term = T.square(T.sub(sq, 1.0))
        per_row = T.add(T.mul(mask, norm_term), T.mul(1.0 - mask, sq_term))
        return T.mean(per_row)


def interpolate(x_real: np.ndarray, x_fake: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    eps = rng.random((x_real.shape[0], 1))
    return eps * x_real + (1.0 - eps) * x_fake


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_batches(x_real, x_fake):
    xr, xf = _data(x_real), _data(x_fake)
    if xr.ndim != 2 or xf.ndim != 2 or xr.shape[1] != xf.shape[1]:
        raise T.ShapeError(f"real {xr.shape} and fake {xf.shape} batches differ in width")
    if len(xr) == 0 or len(xf) == 0:
        raise ValueError("empty batch")
    return xr, xf


def wgan_critic_loss(
    critic: Critic,
    x_real,
    x_fake,
    penalty_coeff: float,
    rng: np.random.Generator | None = None,
    x_hat: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """(critic_loss, penalty_term) with the fake batch treated as a constant.

    Interpolates pair ``x_real[i]`` with ``x_fake[i]``; pass ``x_hat`` to fix
    them explicitly.
    """
    xr, xf = _check_batches(x_real, x_fake)
    try:
        diff = T.sub(T.mean(critic_value(critic, xf)), T.mean(critic_value(critic, xr)))
        if x_hat is None:
            if len(xr) != len(xf):
                raise T.ShapeError("interpolation needs equally sized batches")
            x_hat = interpolate(xr, xf, rng if rng is not None else np.random.default_rng())
        penalty = gradient_penalty(critic, x_hat)
        loss = T.add(diff, T.mul(penalty_coeff, penalty))
    except NonFiniteError as err:
        raise DivergenceError("non-finite critic loss") from err
    return loss, penalty


def wgan_generator_loss(critic: Critic, x_fake) -> Tensor:
    try:
        return T.neg(T.mean(critic_value(critic, x_fake)))
    except NonFiniteError as err:
        raise DivergenceError("non-finite generator loss") from err


def wgan_losses(
    critic: Critic,
    x_real,
    x_fake,
    penalty_coeff: float = 10.0,
    rng: np.random.Generator | None = None,
    x_hat: np.ndarray | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """(critic_loss, generator_loss, penalty_term) for the gradient-penalised WGAN.

    critic_loss = mean D(fake) - mean D(real) + coeff * penalty; the critic
    minimises it. generator_loss = -mean D(fake) keeps ``x_fake``'s graph.
    """
    critic_loss, penalty = wgan_critic_loss(critic, x_real, x_fake, penalty_coeff, rng, x_hat)
    return critic_loss, wgan_generator_loss(critic, x_fake), penalty


def jsd_losses(critic: Critic, x_real, x_fake) -> tuple[Tensor, Tensor]:
    """(critic_loss, generator_loss) for the minimax Jensen-Shannon game.

    The critic maximises mean log D(real) + mean log(1 - D(fake)); critic_loss
    is the negation of that objective. The generator minimises
    mean log(1 - D(fake)).
    """
    if critic.divergence != "jsd":
        raise ValueError("jsd_losses needs a critic built with divergence='jsd'")
    _check_batches(x_real, x_fake)
    try:
        d_real = critic_value(critic, x_real)
        d_fake = critic_value(critic, x_fake)
        fake_term = T.mean(T.log(T.sub(1.0, d_fake)))
        objective = T.add(T.mean(T.log(d_real)), fake_term)
    except NonFiniteError as err:
        raise DivergenceError("non-finite JSD loss") from err
    return T.neg(objective), fake_term
