"""Normalizing flows trained by likelihood, adversarially, or both.

Set ``FLOWGAN_THREADS`` (0 = library default) before the first import to cap
the BLAS thread pools; results never depend on it.
"""

import os

_threads = os.environ.get("FLOWGAN_THREADS", "0").strip() or "0"
if _threads != "0":
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from .adversarial import Critic, DivergenceSpec, gradient_penalty, jsd_losses, wgan_losses  # noqa: E402
from .data import Dataset, load_idx, make_synthetic, read_idx  # noqa: E402
from .errors import ConfigurationError, DivergenceError  # noqa: E402
from .flow import FlowModel, build_flow, generate, invert, log_likelihood, sample  # noqa: E402
from .training import MetricLog, TrainConfig, hybrid_loss, mle_loss, train  # noqa: E402

__all__ = [
    "Critic",
    "DivergenceSpec",
    "gradient_penalty",
    "jsd_losses",
    "wgan_losses",
    "Dataset",
    "load_idx",
    "make_synthetic",
    "read_idx",
    "ConfigurationError",
    "DivergenceError",
    "FlowModel",
    "build_flow",
    "generate",
    "invert",
    "log_likelihood",
    "sample",
    "MetricLog",
    "TrainConfig",
    "hybrid_loss",
    "mle_loss",
    "train",
]
