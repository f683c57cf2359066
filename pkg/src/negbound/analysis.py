"""Feature diagnostics (histograms, histogram W1) and the constant-score sub-class optimum check."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datamodel import EmbeddingSet
from .errors import NumericalError
from .losses import logsumexp
from .rng import stream


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if edges.ndim != 1 or counts.ndim != 1 or counts.size != edges.size - 1:
            raise ValueError("need len(counts) == len(bin_edges) - 1")
        if np.any(np.diff(edges) < 0):
            raise ValueError("bin edges must be sorted")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    def to_rows(self) -> list[tuple[float, float, int]]:
        return [(float(a), float(b), int(c)) for a, b, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts)]


def histogram(values, n_bins: int, value_range: tuple[float, float]) -> Histogram:
    lo, hi = value_range
    if hi <= lo:
        # degenerate range: one bin around the common value
        lo, hi = lo - 0.5, lo + 0.5
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=max(1, int(n_bins)), range=(lo, hi))
    return Histogram(edges, counts)


def within_class_cosines(s: EmbeddingSet, class_id: int) -> np.ndarray:
    """Cosine similarity of every unordered pair i < j inside one class."""
    idx = np.flatnonzero(s.labels == class_id)
    if idx.size < 2:
        raise ValueError(f"class {class_id} has {idx.size} member(s); need at least 2")
    x = s.features[idx]
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"class {class_id} contains a zero vector")
    x = x / norms[:, None]
    g = np.clip(x @ x.T, -1.0, 1.0)
    iu = np.triu_indices(idx.size, k=1)
    return g[iu]


def within_class_cosine_histogram(s: EmbeddingSet, class_id: int, n_bins: int | None = None) -> Histogram:
    """Histogram over [-1, 1] of same-class pair cosines, floor(sqrt(#pairs)) bins by default."""
    cos = within_class_cosines(s, class_id)
    n_bins = n_bins or max(1, math.isqrt(cos.size))
    return histogram(cos, n_bins, (-1.0, 1.0))


def norm_histogram(s: EmbeddingSet, value_range: tuple[float, float] | None = None, n_bins: int | None = None) -> Histogram:
    """Histogram of row norms of an unnormalised set.

    Pass a shared ``value_range`` (see :func:`shared_norm_range`) when several
    sets are to be compared on identical bins.
    """
    if s.normalized:
        raise ValueError("norm histograms need the unnormalised features")
    if s.n == 0:
        raise ValueError("empty set")
    norms = np.linalg.norm(s.features, axis=1)
    if value_range is None:
        value_range = (float(norms.min()), float(norms.max()))
    return histogram(norms, n_bins or max(1, math.isqrt(s.n)), value_range)


def shared_norm_range(sets) -> tuple[float, float]:
    norms = np.concatenate([np.linalg.norm(s.features, axis=1) for s in sets])
    return float(norms.min()), float(norms.max())


def wasserstein1(h1: Histogram, h2: Histogram) -> float:
    """First Wasserstein distance between two normalised histograms on identical bins.

    Mass sits at bin midpoints, so the distance is the integral of the CDF
    difference over the gaps between consecutive midpoints.
    """
    if h1.bin_edges.shape != h2.bin_edges.shape or not np.array_equal(h1.bin_edges, h2.bin_edges):
        raise ValueError("histograms must share identical bin edges")
    if h1.total < 1 or h2.total < 1:
        raise ValueError("both histograms need at least one count")
    p = h1.counts / h1.total
    q = h2.counts / h2.total
    cdf_gap = np.abs(np.cumsum(p - q))[:-1]
    return float(math.fsum(cdf_gap * np.diff(h1.midpoints)))


def relative_change_curve(reference: float, distances) -> list[float]:
    if not reference > 0:
        raise ValueError("reference distance must be positive")
    return [float(d) / reference for d in distances]


# --------------------------------------------------------------------------
# constant-score optimum of the sub-class loss


@dataclass
class SubsetFamily:
    """Anchor classes and class subsets with their draw probabilities."""

    n_classes: int
    anchors: np.ndarray  # (m,)
    masks: np.ndarray  # (m, |C|) bool
    weights: np.ndarray  # (m,), sums to 1
    exact: bool


def subset_family(n_classes: int, k: int, samples: int = 200_000, seed: int = 0) -> SubsetFamily:
    """Distinct (anchor, C_sub) pairs from one anchor and k negatives under uniform classes.

    Enumerated exactly for |C| <= 6 and k <= 6, otherwise estimated from
    ``samples`` draws.
    """
    if n_classes < 1 or k < 1:
        raise ValueError("n_classes and k must be >= 1")
    exact = n_classes <= 6 and k <= 6
    if exact:
        seqs = np.indices((n_classes,) * (k + 1)).reshape(k + 1, -1).T
        w = np.full(seqs.shape[0], float(n_classes) ** -(k + 1))
    else:
        seqs = stream(seed, "uniform-optimum-family").integers(0, n_classes, size=(samples, k + 1))
        w = np.full(samples, 1.0 / samples)
    bits = np.bitwise_or.reduce(np.left_shift(np.int64(1), seqs), axis=1)
    key = seqs[:, 0] * (np.int64(1) << n_classes) + bits
    uniq, inv = np.unique(key, return_inverse=True)
    weights = np.bincount(inv, weights=w)
    anchors = uniq >> n_classes
    sub_bits = uniq & ((np.int64(1) << n_classes) - 1)
    masks = ((sub_bits[:, None] >> np.arange(n_classes)) & 1).astype(bool)
    return SubsetFamily(n_classes, anchors, masks, weights, exact)


def _softmax_rows(q: np.ndarray, masks: np.ndarray) -> np.ndarray:
    logits = np.where(masks, q[None, :], -np.inf)
    return np.exp(logits - logsumexp(logits, axis=1)[:, None])


def subclass_loss(q: np.ndarray, fam: SubsetFamily) -> float:
    q = np.asarray(q, dtype=np.float64)
    logits = np.where(fam.masks, q[None, :], -np.inf)
    per = logsumexp(logits, axis=1) - q[fam.anchors]
    return math.fsum(fam.weights * per)


def subclass_gradient(q: np.ndarray, fam: SubsetFamily) -> np.ndarray:
    p = _softmax_rows(np.asarray(q, dtype=np.float64), fam.masks)
    g = fam.weights @ p
    np.subtract.at(g, fam.anchors, fam.weights)
    return g


def stationarity_residual(q: np.ndarray, fam: SubsetFamily) -> np.ndarray:
    """Per class c: sum over subsets anchored at c of weight * (1 - |S| * softmax_c(S))."""
    p = _softmax_rows(np.asarray(q, dtype=np.float64), fam.masks)
    rows = np.arange(fam.anchors.size)
    terms = fam.weights * (1.0 - fam.masks.sum(axis=1) * p[rows, fam.anchors])
    return np.bincount(fam.anchors, weights=terms, minlength=fam.n_classes)


@dataclass
class UniformOptimumResult:
    q: np.ndarray
    spread: float
    loss: float
    steps: int
    grad_norm: float
    uniform_grad_norm: float
    uniform_residual_norm: float
    exact: bool

    def to_dict(self) -> dict:
        return {
            "q": self.q.tolist(),
            "spread": self.spread,
            "loss": self.loss,
            "steps": self.steps,
            "grad_norm": self.grad_norm,
            "uniform_grad_norm": self.uniform_grad_norm,
            "uniform_residual_norm": self.uniform_residual_norm,
            "exact_enumeration": self.exact,
        }


def verify_uniform_optimum(
    n_classes: int,
    k: int,
    steps: int = 20_000,
    lr: float = 1.0,
    tol: float = 1e-5,
    seed: int = 0,
) -> UniformOptimumResult:
    """Gradient descent on the frequency-weighted sub-class loss over constant scores.

    Starts from a random score vector and stops once max(q) - min(q) < tol.
    Raises :class:`NumericalError` if the step budget runs out first.
    """
    fam = subset_family(n_classes, k, seed=seed)
    q = stream(seed, "uniform-optimum-init").normal(size=n_classes)
    g = subclass_gradient(q, fam)
    it = 0
    while np.ptp(q) >= tol:
        if it >= steps:
            raise NumericalError(f"no convergence after {steps} steps (spread {np.ptp(q):.3g})")
        q = q - lr * g
        g = subclass_gradient(q, fam)
        it += 1
    u = np.zeros(n_classes)
    return UniformOptimumResult(
        q=q,
        spread=float(np.ptp(q)),
        loss=subclass_loss(q, fam),
        steps=it,
        grad_norm=float(np.linalg.norm(g)),
        uniform_grad_norm=float(np.linalg.norm(subclass_gradient(u, fam))),
        uniform_residual_norm=float(np.linalg.norm(stationarity_residual(u, fam))),
        exact=fam.exact,
    )
