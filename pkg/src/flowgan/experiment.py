"""Glue between a parsed config and the library: data, classifier, sweeps.

Shared by the command-line runner and the acceptance tests so both exercise
the same code paths.
"""

from __future__ import annotations

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, dataset_from_idx, make_synthetic
from .evaluation.density import GmmBaseline, default_bandwidth_grid, gmm_bandwidth_search
from .evaluation.scores import label_distribution, mode_score, train_surrogate_classifier
from .flow import FlowModel
from .rng import stream
from .training import TrainState, restore_params


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "idx":
        return dataset_from_idx(
            cfg.idx_images,
            cfg.idx_labels or None,
            seed=cfg.data_seed,
            pool14=cfg.pool14,
            test_images=cfg.idx_test_images or None,
            test_labels=cfg.idx_test_labels or None,
        )
    return make_synthetic(cfg.dataset, cfg.n_samples, cfg.data_seed)


def build_classifier(cfg: ExperimentConfig, ds: Dataset):
    """Surrogate classifier, or None when disabled or the data is unlabeled."""
    if not cfg.classifier or ds.train_labels is None:
        return None
    return train_surrogate_classifier(
        ds.train, ds.train_labels, seed=cfg.classifier_seed, n_classes=ds.n_classes,
        x_heldout=ds.val, labels_heldout=ds.val_labels,
    )


def model_from_state(cfg: ExperimentConfig, dim: int, state: TrainState) -> FlowModel:
    model = cfg.train_config().build_model(dim)
    restore_params(model.parameters(), state.flow_params)
    return model


def eval_points(cfg: ExperimentConfig, ds: Dataset) -> np.ndarray:
    x = ds.test if cfg.eval_split == "test" else ds.val
    if cfg.eval_points and cfg.eval_points < len(x):
        x = x[: cfg.eval_points]
    return x


def bandwidth_grid(cfg: ExperimentConfig) -> np.ndarray:
    return default_bandwidth_grid(cfg.n_bandwidths, cfg.bandwidth_low)


def gmm_sweep(ds: Dataset, classifier, grid, n_score_samples: int = 2000, seed: int = 0) -> np.ndarray:
    """Rows (sigma, val_nll, mode_score) for training-centred GMMs on ``grid``.

    mode_score is NaN without a classifier.
    """
    _, curve = gmm_bandwidth_search(ds.train, ds.val, grid)
    rows = np.empty((len(curve), 3))
    rows[:, :2] = curve
    p_star = None
    if classifier is not None:
        p_star = label_distribution(ds.train_labels, classifier.n_classes)
    for i, s in enumerate(curve[:, 0]):
        if p_star is None:
            rows[i, 2] = np.nan
            continue
        rng = stream(seed, "eval")
        samples = GmmBaseline(ds.train, float(s)).sample(n_score_samples, rng)
        rows[i, 2] = mode_score(classifier, samples, p_star)
    return rows


__all__ = [
    "build_dataset",
    "build_classifier",
    "model_from_state",
    "eval_points",
    "bandwidth_grid",
    "gmm_sweep",
]
