"""Generator Jacobians and their singular-value spectra."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..flow import FlowModel, generate


class ConvergenceError(ArithmeticError):
    def __init__(self, off_norm: float, sweeps: int):
        self.off_norm = off_norm
        super().__init__(f"Jacobi did not converge in {sweeps} sweeps (off-diagonal norm {off_norm:.3e})")


def jacobians(model: FlowModel, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """dG/dz at each row of z, plus the flow's own log|det| there.

    Uses one reverse pass per output coordinate; rows do not interact, so
    each pass yields that output's gradient row for the whole batch.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n, d = z.shape
    jac = np.empty((n, d, d))
    with T.Tape() as tape:
        zt = T.parameter(z)
        x, logdet = generate(model, zt)
        for j in range(d):
            out = T.sum_(T.slice_(x, j, j + 1))
            (g,) = tape.gradient(out, [zt])
            jac[:, j, :] = g.data
    if not np.isfinite(jac).all():
        raise FloatingPointError("non-finite Jacobian entries")
    return jac, logdet.data.copy()


def jacobian(model: FlowModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    return jacobians(model, z)[0][0]


def singular_values(matrix, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Singular values, descending, by cyclic Jacobi on the Gram matrix.

    The Gram matrix A^T A is diagonalised implicitly (one-sided form): each
    rotation is chosen from Gram entries and applied to the columns of A, so
    small singular values are not lost to squaring. A pair counts as
    converged once |g_pq| <= tol * sqrt(g_pp g_qq).
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("singular_values expects a square matrix")
    if not np.isfinite(a).all():
        raise ValueError("matrix has non-finite entries")
    n = a.shape[1]
    u = a.copy()
    for sweep in range(max_sweeps):
        rotated = False
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                up, uq = u[:, p], u[:, q]
                alpha = up @ up
                beta = uq @ uq
                gamma = up @ uq
                off += gamma * gamma
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * up - s * uq
                u[:, q] = s * up + c * uq
                u[:, p] = new_p
        if not rotated:
            break
    else:
        raise ConvergenceError(math.sqrt(2.0 * off), max_sweeps)
    sv = np.sqrt(np.sum(u * u, axis=0))
    return np.sort(sv)[::-1]


@dataclass
class SpectralReport:
    singular_values: np.ndarray  # [n_z, d], each row descending
    log_sv: np.ndarray  # pooled log-magnitudes, ascending
    cdf: np.ndarray  # fraction of pooled values <= log_sv[i]
    avg_logdet: float
    logdet_fwd: np.ndarray  # the flow's own log|det| at each z

    def quantile(self, q: float) -> float:
        return float(np.quantile(self.log_sv, q))

    def spread(self, lo: float = 0.05, hi: float = 0.95) -> float:
        return self.quantile(hi) - self.quantile(lo)

    @property
    def sum_log_sv(self) -> np.ndarray:
        return np.sum(np.log(self.singular_values), axis=1)


def spectral_report(model: FlowModel, n_z: int = 64, seed=0) -> SpectralReport:
    if n_z < 1:
        raise ValueError("n_z must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = model.prior.sample(n_z, rng)
    jac, logdet = jacobians(model, z)
    sv = np.stack([singular_values(j) for j in jac])
    pooled = np.sort(np.log(sv).ravel())
    cdf = np.arange(1, pooled.size + 1) / pooled.size
    avg = float(np.mean(np.sum(np.log(sv), axis=1)))
    return SpectralReport(sv, pooled, cdf, avg, logdet)
