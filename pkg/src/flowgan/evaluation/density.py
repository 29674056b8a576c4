"""Isotropic Gaussian mixtures centred on data points: the memorisation
baseline and the Parzen (KDE) estimator share this code."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def default_bandwidth_grid(n: int = 40, low: float = 0.005) -> np.ndarray:
    """``n`` log-spaced bandwidths in (low, 1]."""
    return np.geomspace(low, 1.0, n + 1)[1:]


@dataclass
class GmmBaseline:
    centers: np.ndarray
    sigma: float

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or len(self.centers) == 0:
            raise ValueError("GMM needs a nonempty [m, d] array of centers")
        if not 0.0 < self.sigma <= 1.0:
            raise ValueError(f"bandwidth {self.sigma} outside (0, 1]")

    @property
    def m(self) -> int:
        return len(self.centers)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return gmm_logpdf(self, x)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, self.m, size=n)
        return self.centers[idx] + self.sigma * rng.standard_normal((n, self.centers.shape[1]))


def _log_kernel_sums(centers: np.ndarray, x: np.ndarray, sigma: float, chunk: int | None) -> np.ndarray:
    out = np.empty(len(x))
    inv = -0.5 / (sigma * sigma)
    if chunk is None:
        # cap the [chunk, m, d] difference block at ~4M entries
        chunk = max(1, 4_000_000 // (centers.shape[0] * centers.shape[1]))
    for start in range(0, len(x), chunk):
        xb = x[start:start + chunk]
        diff = xb[:, None, :] - centers[None, :, :]
        e = inv * np.einsum("ijk,ijk->ij", diff, diff)
        top = e.max(axis=1, keepdims=True)
        out[start:start + chunk] = top[:, 0] + np.log(np.sum(np.exp(e - top), axis=1))
    return out


def gmm_logpdf(gmm: GmmBaseline, x, chunk: int | None = None) -> np.ndarray:
    """log (1/m) sum_i N(x; c_i, sigma^2 I), one value per row of x."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = gmm.centers.shape[1]
    if x.shape[1] != d:
        raise ValueError(f"expected width {d}, got {x.shape[1]}")
    norm = -math.log(gmm.m) - 0.5 * d * LOG_2PI - d * math.log(gmm.sigma)
    return _log_kernel_sums(gmm.centers, x, gmm.sigma, chunk) + norm


def gmm_bandwidth_search(centers, val_set, grid=None) -> tuple[float, np.ndarray]:
    """Bandwidth from ``grid`` minimising mean validation NLL.

    Returns (sigma*, curve) where curve rows are (sigma, val_nll) in grid
    order. Ties go to the smaller sigma.
    """
    grid = default_bandwidth_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.size == 0 or np.any(grid <= 0) or np.any(grid > 1):
        raise ValueError("bandwidth grid must be a nonempty subset of (0, 1]")
    val_set = np.asarray(val_set, dtype=np.float64)
    curve = np.empty((len(grid), 2))
    for i, s in enumerate(grid):
        curve[i] = s, -np.mean(gmm_logpdf(GmmBaseline(centers, float(s)), val_set))
    best = None
    for s, nll in sorted(curve.tolist()):
        if best is None or nll < best[1]:
            best = (s, nll)
    return best[0], curve


def kde_estimate(generated_samples, x_eval, sigma: float) -> np.ndarray:
    """Parzen-window log-density (nats per point) from generated samples."""
    return gmm_logpdf(GmmBaseline(generated_samples, sigma), x_eval)
