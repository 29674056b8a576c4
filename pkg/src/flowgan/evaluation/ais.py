"""Annealed importance sampling under a Gaussian observation model.

The generator is treated as a latent-variable model
p(x, z) = p(z) N(x; G(z), sigma_obs^2 I) and the marginal p(x) is estimated
by annealing from the prior to the posterior over z.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from ..errors import DivergenceError
from ..tensor import NonFiniteError

log = logging.getLogger(__name__)


def log_mean_exp(w, axis=-1):
    w = np.asarray(w, dtype=np.float64)
    return logsumexp(w, axis=axis) - math.log(w.shape[axis])


def sigmoid_schedule(n_steps: int, delta: float = 4.0) -> np.ndarray:
    """n_steps + 1 inverse temperatures from 0 to 1, dense at both ends."""
    if n_steps < 1:
        raise ValueError("need at least one annealing step")
    if n_steps == 1:
        return np.array([0.0, 1.0])
    s = expit(np.linspace(-delta, delta, n_steps + 1))
    betas = (s - s[0]) / (s[-1] - s[0])
    betas[0], betas[-1] = 0.0, 1.0
    return betas


def linear_schedule(n_steps: int) -> np.ndarray:
    if n_steps < 1:
        raise ValueError("need at least one annealing step")
    return np.linspace(0.0, 1.0, n_steps + 1)


@dataclass
class AisConfig:
    n_chains: int = 64
    n_temperatures: int = 1000
    schedule: str = "sigmoid"
    sigma_obs: float = 0.1
    step_size: float = 0.05
    n_sweeps: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.sigma_obs <= 0:
            raise ValueError("sigma_obs must be positive")
        if self.n_chains < 1 or self.n_temperatures < 1 or self.n_sweeps < 0:
            raise ValueError("n_chains and n_temperatures must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.schedule not in ("sigmoid", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def betas(self) -> np.ndarray:
        if self.schedule == "sigmoid":
            return sigmoid_schedule(self.n_temperatures)
        return linear_schedule(self.n_temperatures)


@dataclass
class AisResult:
    log_px: np.ndarray
    log_weights: np.ndarray
    acceptance: np.ndarray
    warnings: list[str] = field(default_factory=list)

    def bootstrap_stderr(self, n_boot: int = 1000, seed: int = 0) -> np.ndarray:
        """Chain-level bootstrap standard error of each estimate."""
        rng = np.random.default_rng(seed)
        c = self.log_weights.shape[1]
        idx = rng.integers(0, c, size=(n_boot, c))
        boots = log_mean_exp(self.log_weights[:, idx], axis=-1)
        return boots.std(axis=1, ddof=1)


def _obs_loglik(x, gx, sigma):
    d = x.shape[1]
    r = x - gx
    return -0.5 * np.sum(r * r, axis=1) / sigma**2 - d * (math.log(sigma) + 0.5 * math.log(2 * math.pi))


def _generate(model, z: np.ndarray) -> np.ndarray | None:
    try:
        return model.generate_array(z)
    except (DivergenceError, NonFiniteError):
        return None


def ais_estimate(model, x, config: AisConfig | None = None) -> AisResult:
    """Estimate log p(x) (nats) for each row of ``x``.

    ``model`` needs ``prior`` (with ``sample`` and ``logpdf_array``) and
    ``generate_array``. All points and chains advance together as one batch.
    Chains that never accept a move are kept and reported in ``warnings``.
    """
    config = config or AisConfig()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n_points, d = x.shape
    c = config.n_chains
    rng = np.random.default_rng(config.seed)
    betas = config.betas()
    prior = model.prior
    sigma = config.sigma_obs

    xs = np.repeat(x, c, axis=0)
    z = prior.sample(n_points * c, rng)
    gz = _generate(model, z)
    if gz is None:
        raise DivergenceError("generator is non-finite at prior samples")
    lik = _obs_loglik(xs, gz, sigma)
    lp = prior.logpdf_array(z)
    logw = np.zeros(n_points * c)
    accepted = np.zeros(n_points * c)
    proposals = 0
    n_t = len(betas) - 1
    for t in range(1, n_t + 1):
        logw += (betas[t] - betas[t - 1]) * lik
        if t == n_t:
            break
        b = betas[t]
        for _ in range(config.n_sweeps):
            prop = z + config.step_size * rng.standard_normal(z.shape)
            u = rng.random(len(z))
            gp = _generate(model, prop)
            proposals += 1
            if gp is None:
                continue
            lik_p = _obs_loglik(xs, gp, sigma)
            lp_p = prior.logpdf_array(prop)
            log_ratio = (lp_p + b * lik_p) - (lp + b * lik)
            acc = np.log(u) < log_ratio
            z[acc] = prop[acc]
            lik[acc] = lik_p[acc]
            lp[acc] = lp_p[acc]
            accepted += acc
    logw = logw.reshape(n_points, c)
    rate = (accepted / max(proposals, 1)).reshape(n_points, c)
    warnings = []
    if proposals:
        stuck = np.argwhere(rate == 0.0)
        for p, ch in stuck:
            warnings.append(f"point {p} chain {ch}: no accepted moves")
        if len(stuck):
            log.warning("AIS: %d of %d chains never accepted a move", len(stuck), rate.size)
    return AisResult(log_mean_exp(logw, axis=1), logw, rate, warnings)
