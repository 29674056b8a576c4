"""Likelihood estimators, Jacobian spectra and sample-quality scores."""

from .ais import AisConfig, AisResult, ais_estimate, log_mean_exp
from .density import GmmBaseline, default_bandwidth_grid, gmm_bandwidth_search, gmm_logpdf, kde_estimate
from .scores import SoftmaxClassifier, inception_score, mode_score, train_surrogate_classifier
from .spectral import ConvergenceError, SpectralReport, jacobian, jacobians, singular_values, spectral_report

__all__ = [
    "AisConfig",
    "AisResult",
    "ais_estimate",
    "log_mean_exp",
    "GmmBaseline",
    "default_bandwidth_grid",
    "gmm_bandwidth_search",
    "gmm_logpdf",
    "kde_estimate",
    "SoftmaxClassifier",
    "inception_score",
    "mode_score",
    "train_surrogate_classifier",
    "ConvergenceError",
    "SpectralReport",
    "jacobian",
    "jacobians",
    "singular_values",
    "spectral_report",
]
