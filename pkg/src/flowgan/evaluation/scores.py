"""Sample-quality scores and the small classifier that feeds them."""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..errors import ConfigurationError
from ..nn import MLP
from ..optim import AdamState, adam_step

PROB_FLOOR = 1e-12


class SoftmaxClassifier:
    """Dense tanh network with a softmax head."""

    def __init__(self, dim: int, n_classes: int, hidden=(32, 32), seed: int = 0):
        self.dim = dim
        self.n_classes = n_classes
        self.net = MLP([dim, *hidden, n_classes], np.random.default_rng(seed), "tanh")

    def parameters(self):
        return self.net.parameters("clf.")

    def logits(self, x) -> T.Tensor:
        return self.net(T._wrap(x))

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        with T.no_record():
            z = self.logits(np.asarray(x, dtype=np.float64)).data
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def accuracy(self, x: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict_proba(x).argmax(axis=1) == labels))


def _cross_entropy(clf: SoftmaxClassifier, x: np.ndarray, labels: np.ndarray) -> T.Tensor:
    logits = clf.logits(x)
    # max-shift is a constant, so it does not change the gradient
    shift = np.broadcast_to(logits.data.max(axis=1, keepdims=True), logits.shape)
    shifted = T.sub(logits, shift)
    lse = T.log(T.sum_(T.exp(shifted), 1))
    onehot = np.eye(clf.n_classes)[labels]
    picked = T.sum_(T.mul(shifted, onehot), 1)
    return T.mean(T.sub(lse, picked))


def train_surrogate_classifier(
    x: np.ndarray,
    labels: np.ndarray,
    seed: int = 0,
    n_classes: int | None = None,
    x_heldout: np.ndarray | None = None,
    labels_heldout: np.ndarray | None = None,
    n_steps: int = 600,
    batch_size: int = 256,
    lr: float = 1e-2,
    min_accuracy: float = 0.95,
    hidden=(32, 32),
) -> SoftmaxClassifier:
    """Fit a softmax classifier by Adam; refuse it below ``min_accuracy``.

    Without an explicit held-out set the last 10% of a seeded permutation is
    held out.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0:
        raise ValueError("labels must lie in 0..K-1")
    k = n_classes or int(labels.max()) + 1
    if labels.max() >= k:
        raise ValueError("labels must lie in 0..K-1")
    rng = np.random.default_rng(seed)
    if x_heldout is None:
        perm = rng.permutation(len(x))
        n_hold = max(1, len(x) // 10)
        hold, fit = perm[:n_hold], perm[n_hold:]
        x_heldout, labels_heldout = x[hold], labels[hold]
        x, labels = x[fit], labels[fit]
    clf = SoftmaxClassifier(x.shape[1], k, hidden, seed=int(rng.integers(2**31)))
    params = list(clf.parameters().values())
    state = AdamState.zeros(params)
    for _ in range(n_steps):
        idx = rng.integers(0, len(x), size=min(batch_size, len(x)))
        with T.Tape() as tape:
            loss = _cross_entropy(clf, x[idx], labels[idx])
        grads = tape.gradient(loss, params)
        adam_step(params, grads, state, lr, 0.9, 0.999, 1e-8)
    acc = clf.accuracy(x_heldout, labels_heldout)
    if acc < min_accuracy:
        raise ConfigurationError(
            f"surrogate classifier reached {acc:.3f} held-out accuracy, below {min_accuracy}"
        )
    clf.heldout_accuracy = acc
    return clf


def _probs(classifier_or_probs, samples) -> np.ndarray:
    if samples is None:
        p = np.asarray(classifier_or_probs, dtype=np.float64)
    else:
        p = classifier_or_probs.predict_proba(samples)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("need a nonempty [n, K] probability table")
    return p


def _kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    # rows of p against a single distribution q; 0 * log 0 counts as 0
    return np.sum(p * (np.log(np.maximum(p, PROB_FLOOR)) - np.log(np.maximum(q, PROB_FLOOR))), axis=-1)


def inception_score(classifier, samples=None) -> float:
    """exp(E_x KL(p(y|x) || p(y))), p(y) the sample-average conditional.

    ``classifier`` may instead be an [n, K] table of conditionals when
    ``samples`` is omitted.
    """
    p = _probs(classifier, samples)
    marginal = p.mean(axis=0)
    return float(np.exp(np.mean(_kl_rows(p, marginal))))


def mode_score(classifier, samples=None, train_label_dist=None) -> float:
    """exp(E_x KL(p(y|x) || p*(y)) - KL(p*(y) || p(y)))."""
    p = _probs(classifier, samples)
    p_star = np.asarray(train_label_dist, dtype=np.float64)
    if p_star.shape != (p.shape[1],) or np.any(p_star < 0) or abs(p_star.sum() - 1.0) > 1e-9:
        raise ValueError("train_label_dist must be a distribution over the K labels")
    marginal = p.mean(axis=0)
    return float(np.exp(np.mean(_kl_rows(p, p_star)) - _kl_rows(p_star, marginal)))


def label_distribution(labels: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
    return counts / counts.sum()
