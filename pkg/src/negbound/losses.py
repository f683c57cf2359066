"""Contrastive and supervised losses, the gap term, and a linear probe."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datamodel import AugmentationSpec, EmbeddingSet, MeanRepresentations, per_sample_means, sample_batches
from .errors import NumericalError
from .probkit import ClassDistribution


@dataclass(frozen=True)
class LossEstimate:
    value: float
    stderr: float = 0.0
    n_samples: int = 1
    temperature: float = 1.0

    @classmethod
    def from_samples(cls, values: np.ndarray, temperature: float = 1.0) -> "LossEstimate":
        values = np.asarray(values, dtype=np.float64)
        n = values.size
        if n == 0:
            raise ValueError("no samples")
        mean = math.fsum(values) / n
        se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(mean, se, n, temperature)

    def scaled(self, coef: float) -> "LossEstimate":
        return LossEstimate(coef * self.value, abs(coef) * self.stderr, self.n_samples, self.temperature)

    def to_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "n_samples": self.n_samples, "temperature": self.temperature}


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted log-sum-exp; entries equal to -inf are ignored."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def info_nce(z: np.ndarray, z_set: np.ndarray, t: float = 1.0) -> float:
    """InfoNCE for one anchor; ``z_set[0]`` is the positive."""
    if t <= 0:
        raise ValueError("temperature must be positive")
    z_set = np.atleast_2d(np.asarray(z_set, dtype=np.float64))
    if z_set.shape[0] < 1:
        raise ValueError("z_set must contain the positive")
    logits = z_set @ np.asarray(z, dtype=np.float64) / t
    m = logits.max()
    return float(math.log(math.fsum(np.exp(logits - m))) + m - logits[0])


def info_nce_batch(anchors: np.ndarray, positives: np.ndarray, negatives: np.ndarray, t: float = 1.0) -> np.ndarray:
    """Per-tuple InfoNCE for stacked anchors (n, h), positives (n, h), negatives (n, K, h)."""
    if t <= 0:
        raise ValueError("temperature must be positive")
    pos = np.einsum("nh,nh->n", anchors, positives) / t
    neg = np.einsum("nh,nkh->nk", anchors, negatives) / t
    logits = np.concatenate([pos[:, None], neg], axis=1)
    return logsumexp(logits, axis=1) - pos


def estimate_L_info(
    s: EmbeddingSet,
    spec: AugmentationSpec,
    k: int,
    t: float,
    n_batches: int,
    rng: np.random.Generator,
    dist: ClassDistribution | None = None,
    chunk: int = 2048,
) -> LossEstimate:
    """Monte-Carlo mean of InfoNCE over independently sampled tuples."""
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    vals = []
    done = 0
    while done < n_batches:
        m = min(chunk, n_batches - done)
        b = sample_batches(s, spec, k, m, rng, dist)
        vals.append(info_nce_batch(b.anchors, b.positives, b.negatives, t))
        done += m
    return LossEstimate.from_samples(np.concatenate(vals), t)


# --------------------------------------------------------------------------
# mean classifier


def class_logits(z: np.ndarray, class_means: np.ndarray, t: float = 1.0) -> np.ndarray:
    return np.atleast_2d(z) @ np.asarray(class_means).T / t


def subset_cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-row cross-entropy restricted to classes where ``mask`` is True."""
    masked = np.where(mask, logits, -np.inf)
    rows = np.arange(logits.shape[0])
    if not mask[rows, targets].all():
        raise ValueError("every row's target class must be inside its subset")
    return logsumexp(masked, axis=1) - logits[rows, targets]


def bag_loss(z: np.ndarray, c: int, bag, class_means: np.ndarray, t: float = 1.0) -> float:
    """Cross-entropy of class ``c`` against a bag of classes counted with multiplicity."""
    bag = np.asarray(bag, dtype=np.int64)
    if c not in bag:
        raise ValueError("the bag must contain the target class")
    logits = class_logits(z, class_means, t)[0]
    return float(logsumexp(logits[bag]) - logits[c])


def mean_classifier_loss(
    s: EmbeddingSet,
    means: MeanRepresentations | np.ndarray,
    t: float = 1.0,
    class_subset=None,
) -> LossEstimate:
    """Cross-entropy of the classifier whose class weights are the class means.

    With ``class_subset`` the softmax runs over that subset only and samples
    labelled outside it are dropped.
    """
    mu = means.class_means if isinstance(means, MeanRepresentations) else np.asarray(means)
    labels = s.labels
    mask = np.ones(mu.shape[0], dtype=bool)
    rows = np.ones(s.n, dtype=bool)
    if class_subset is not None:
        mask = np.zeros(mu.shape[0], dtype=bool)
        mask[np.asarray(sorted(set(int(c) for c in class_subset)), dtype=np.int64)] = True
        rows = mask[labels]
    if not rows.any():
        raise ValueError("no samples fall inside the class subset")
    logits = class_logits(s.features[rows], mu, t)
    per = subset_cross_entropy(logits, labels[rows], np.broadcast_to(mask, logits.shape))
    return LossEstimate.from_samples(per, t)


def gap_term_d(
    s: EmbeddingSet,
    spec: AugmentationSpec,
    m_aug: int,
    rng: np.random.Generator,
    t: float = 1.0,
    class_means: np.ndarray | None = None,
) -> LossEstimate:
    """Gap between per-sample and class mean representations.

    Mean over samples of ``mu(x) . (mu_c - mu(x)) / t`` with ``mu(x)`` the
    average of ``m_aug`` augmentations of ``x``. Class means default to those of
    ``s`` itself.
    """
    mu_x = per_sample_means(s, spec, m_aug, rng)
    if class_means is None:
        counts = s.class_counts
        sums = np.zeros((s.n_classes, s.dim))
        np.add.at(sums, s.labels, mu_x)
        class_means = sums / np.maximum(counts, 1)[:, None]
    per = np.einsum("nh,nh->n", mu_x, class_means[s.labels] - mu_x) / t
    return LossEstimate.from_samples(per, t)


# --------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeResult:
    weights: np.ndarray
    bias: np.ndarray
    loss: LossEstimate
    initial_loss: float
    accuracy: float
    history: list[float] = field(default_factory=list)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return predict_linear(features, self.weights, self.bias)


def predict_linear(features: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    scores = np.atleast_2d(features) @ weights.T
    if bias is not None:
        scores = scores + bias
    # argmax returns the first maximum, i.e. ties go to the smallest class id
    return np.argmax(scores, axis=1)


def _probe_loss(x, y, w, b):
    logits = x @ w.T + b
    per = logsumexp(logits, axis=1) - logits[np.arange(x.shape[0]), y]
    return per, logits


def train_linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    means_for_init: np.ndarray | None = None,
    epochs: int = 300,
    lr: float = 1.0,
) -> ProbeResult:
    """Multinomial logistic regression by full-batch gradient descent.

    Steps that would raise the loss are retried at half the step size, so the
    training loss never increases from its initial value.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(y, minlength=n_classes)
    if (counts == 0).any():
        raise ValueError(f"class {int(np.flatnonzero(counts == 0)[0])} has no samples")
    n = x.shape[0]
    w = np.zeros((n_classes, x.shape[1])) if means_for_init is None else np.array(means_for_init, dtype=np.float64)
    b = np.zeros(n_classes)
    with np.errstate(all="ignore"):
        per, logits = _probe_loss(x, y, w, b)
    loss = math.fsum(per) / n
    if not math.isfinite(loss):
        raise NumericalError("probe loss is non-finite at iteration 0")
    initial = loss
    history = [loss]
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    step = lr
    for it in range(epochs):
        p = np.exp(logits - logsumexp(logits, axis=1)[:, None])
        g = (p - onehot) / n
        gw, gb = g.T @ x, g.sum(axis=0)
        for _ in range(60):
            w_new, b_new = w - step * gw, b - step * gb
            per_new, logits_new = _probe_loss(x, y, w_new, b_new)
            new = math.fsum(per_new) / n
            if not math.isfinite(new):
                raise NumericalError(f"probe loss became non-finite at iteration {it}")
            if new <= loss:
                break
            step *= 0.5
        else:
            break
        w, b, per, logits, loss = w_new, b_new, per_new, logits_new, new
        history.append(loss)
        step = min(step * 1.25, lr)
    acc = float(np.mean(predict_linear(x, w, b) == y))
    return ProbeResult(w, b, LossEstimate.from_samples(per, 1.0), initial, acc, history)
