"""Cluster, separation and cross-entropy losses on max-pooled similarities."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation

LAMBDA_CLST = 0.8
LAMBDA_SEP = 0.08


@dataclass(frozen=True)
class LossWeights:
    lambda_clst: float = LAMBDA_CLST
    lambda_sep: float = LAMBDA_SEP

    def __post_init__(self):
        for name in ("lambda_clst", "lambda_sep"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigurationError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True, eq=False)
class BatchSimilarities:
    """Max-pooled scores (N, P), labels (N,), and the owning class of each prototype (P,)."""

    scores: np.ndarray
    labels: np.ndarray
    proto_class: np.ndarray

    def __post_init__(self):
        scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        labels = np.atleast_1d(np.asarray(self.labels, dtype=np.int64))
        owner = np.atleast_1d(np.asarray(self.proto_class, dtype=np.int64))
        if scores.shape != (labels.size, owner.size):
            raise ContractViolation(
                f"scores shape {scores.shape} does not match {labels.size} labels x {owner.size} prototypes"
            )
        if not np.all(np.isfinite(scores)):
            raise ContractViolation("similarity scores must be finite")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "proto_class", owner)

    def own_mask(self):
        return self.proto_class[None, :] == self.labels[:, None]


def _masked_argmax(scores, mask):
    # first maximal index wins ties
    masked = np.where(mask, scores, -np.inf)
    idx = np.argmax(masked, axis=1)
    return idx, masked[np.arange(len(scores)), idx]


def cluster_loss_and_grad(batch):
    own = batch.own_mask()
    if not np.all(own.any(axis=1)):
        raise ConfigurationError("a sample's class has no prototypes")
    n = len(batch.labels)
    idx, best = _masked_argmax(batch.scores, own)
    grad = np.zeros_like(batch.scores)
    grad[np.arange(n), idx] = -1.0 / n
    return float(-best.mean()), grad


def separation_loss_and_grad(batch):
    other = ~batch.own_mask()
    if not np.all(other.any(axis=1)):
        raise ConfigurationError("separation loss needs prototypes outside every sample's class")
    n = len(batch.labels)
    idx, best = _masked_argmax(batch.scores, other)
    grad = np.zeros_like(batch.scores)
    grad[np.arange(n), idx] = 1.0 / n
    return float(best.mean()), grad


def cluster_loss(batch):
    """Negative mean over samples of the best same-class similarity."""
    return cluster_loss_and_grad(batch)[0]


def separation_loss(batch):
    """Mean over samples of the best other-class similarity."""
    return separation_loss_and_grad(batch)[0]


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    n, c = logits.shape
    if c < 2:
        raise ContractViolation("cross-entropy needs at least two classes")
    if labels.shape != (n,) or np.any((labels < 0) | (labels >= c)):
        raise ContractViolation(f"labels must be integers in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - log_z[:, None]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def cross_entropy(logits, label):
    """-log softmax(logits)[label] for a single sample."""
    return softmax_cross_entropy(np.asarray(logits, dtype=np.float64)[None], [label])[0]


def total_loss(ce, clst, sep, weights=LossWeights()):
    return ce + weights.lambda_clst * clst + weights.lambda_sep * sep
