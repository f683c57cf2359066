"""Lower bounds of the contrastive loss, the collision upper bound, and their rearrangements.

Class-level quantities (collision probability, coverage probabilities, the
expected log-collision term) depend only on the class distribution and are
computed exactly. Embedding-level conditional losses are Monte-Carlo means over
sampled class configurations, drawn by rejection on the conditioning event so
rare events still get a full sample.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import probkit
from .datamodel import (
    AugmentationSpec,
    EmbeddingSet,
    MeanRepresentations,
    augment_rows,
    compute_class_means,
    draw_members,
)
from .losses import LossEstimate, class_logits, estimate_L_info, gap_term_d, subset_cross_entropy
from .probkit import ClassDistribution
from .rng import stream

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "k_plus_1", "tau", "upsilon", "mu_acc", "linear_acc", "L_info", "d_f",
    "curl_total", "curl_collision", "curl_sup", "curl_sub",
    "prop_total", "prop_sup", "prop_sub", "collision_bound", "sup_ub_curl", "sup_ub_proposed",
)

# cap on class configurations drawn while filling one conditional slice
SLICE_BUDGET = 4_000_000
# denominators below this make a rearranged upper bound infinite
DENOM_FLOOR = 1e-12


@dataclass(frozen=True)
class CollisionStats:
    col: int
    c_sub: frozenset
    covers_all: bool


def collision_stats(anchor_class: int, negative_classes, n_classes: int | None = None) -> CollisionStats:
    negs = [int(c) for c in negative_classes]
    col = sum(1 for c in negs if c == anchor_class)
    c_sub = frozenset([int(anchor_class), *negs])
    covers = n_classes is not None and len(c_sub) == n_classes
    return CollisionStats(col, c_sub, covers)


def collision_arrays(anchor_classes: np.ndarray, negative_classes: np.ndarray, n_classes: int):
    """Vectorised collision statistics: (col, presence mask (n, C), covers_all)."""
    n = anchor_classes.shape[0]
    col = (negative_classes == anchor_classes[:, None]).sum(axis=1)
    present = np.zeros((n, n_classes), dtype=bool)
    present[np.arange(n), anchor_classes] = True
    if negative_classes.size:
        present[np.repeat(np.arange(n), negative_classes.shape[1]), negative_classes.ravel()] = True
    return col, present, present.all(axis=1)


def collision_constants(col: int, t: float) -> tuple[float, float]:
    """(alpha, beta) of the collision upper bound for a batch with ``col`` collisions."""
    return math.log(col + 1), (col + 1) / t


# --------------------------------------------------------------------------
# class level


@dataclass(frozen=True)
class ClassLevel:
    k: int
    draws: int
    tau: float
    upsilon: float
    cover_given_nocol: float
    log_col: float
    log_col_given_col: float


def class_level(dist: ClassDistribution, k: int, convention: str = "k-plus-1") -> ClassLevel:
    draws = probkit.draws_for(k, convention)
    tau = probkit.collision_probability(dist, k).value
    ups = probkit.all_classes_probability(dist, draws, method="dp" if not dist.is_uniform else "auto").value
    return ClassLevel(
        k=k,
        draws=draws,
        tau=tau,
        upsilon=ups,
        cover_given_nocol=probkit.coverage_given_no_collision(dist, k),
        log_col=probkit.expected_log_collision(dist, k),
        log_col_given_col=probkit.expected_log_collision(dist, k, given_collision=True),
    )


def class_level_mc(dist: ClassDistribution, k: int, trials: int = 1_000_000, seed: int = 0) -> dict:
    """Monte-Carlo estimates of the class-level quantities from raw class draws."""
    rng = stream(seed, "class-level-mc", k)
    probs = dist.as_array()
    n_cls = dist.n_classes
    col_n = cover_n = nocol_n = nocol_cover_n = 0
    log_sum = 0.0
    done = 0
    chunk = max(1, 4_000_000 // (k + 1))
    while done < trials:
        m = min(chunk, trials - done)
        cls = rng.choice(n_cls, size=(m, k + 1), p=probs)
        col, _, covers = collision_arrays(cls[:, 0], cls[:, 1:], n_cls)
        col_n += int((col > 0).sum())
        cover_n += int(covers.sum())
        nocol = col == 0
        nocol_n += int(nocol.sum())
        nocol_cover_n += int((nocol & covers).sum())
        log_sum += math.fsum(np.log1p(col))
        done += m
    return {
        "tau": col_n / trials,
        "upsilon": cover_n / trials,
        "cover_given_nocol": nocol_cover_n / nocol_n if nocol_n else float("nan"),
        "log_col": log_sum / trials,
        "trials": trials,
    }


def _sample_nocol(probs: np.ndarray, k: int, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Class configurations conditioned on no negative sharing the anchor class."""
    n_cls = probs.size
    w = probs * (1.0 - probs) ** k
    if w.sum() <= 0.0:
        return np.empty(0, dtype=np.int64), np.empty((0, k), dtype=np.int64)
    anchors = rng.choice(n_cls, size=n, p=w / w.sum())
    negs = np.empty((n, k), dtype=np.int64)
    for c in range(n_cls):
        rows = np.flatnonzero(anchors == c)
        if rows.size == 0:
            continue
        rest = probs.copy()
        rest[c] = 0.0
        negs[rows] = rng.choice(n_cls, size=(rows.size, k), p=rest / rest.sum())
    return anchors, negs


def sample_conditioned(
    dist: ClassDistribution,
    k: int,
    n: int,
    event: str,
    rate: float,
    rng: np.random.Generator,
    budget: int = SLICE_BUDGET,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Up to ``n`` class configurations satisfying ``event``.

    ``event`` is one of ``covers``, ``not_covers`` (over the unconditional
    draw) or ``nocol_covers``, ``nocol_not_covers`` (given no collision).
    ``rate`` is the known acceptance probability, used only to size chunks.
    Returns anchor classes, negative classes and the presence mask.
    """
    probs = dist.as_array()
    n_cls = dist.n_classes
    want_cover = not event.endswith("not_covers")
    given_nocol = event.startswith("nocol")
    empty = (np.empty(0, np.int64), np.empty((0, k), np.int64), np.empty((0, n_cls), bool))
    if rate <= 0.0 or n <= 0:
        return empty
    got_a, got_n, got_p = [], [], []
    have = drawn = 0
    while have < n and drawn < budget:
        m = int(min(budget - drawn, max(256, math.ceil((n - have) / rate * 1.2))))
        m = min(m, max(256, 8_000_000 // (k + 1)))
        if given_nocol:
            a, negs = _sample_nocol(probs, k, m, rng)
        else:
            cls = rng.choice(n_cls, size=(m, k + 1), p=probs)
            a, negs = cls[:, 0], cls[:, 1:]
        drawn += m
        _, present, covers = collision_arrays(a, negs, n_cls)
        keep = covers if want_cover else ~covers
        got_a.append(a[keep])
        got_n.append(negs[keep])
        got_p.append(present[keep])
        have += int(keep.sum())
    if not got_a:
        return empty
    return np.concatenate(got_a)[:n], np.concatenate(got_n)[:n], np.concatenate(got_p)[:n]


def score_subclass(
    s: EmbeddingSet,
    spec: AugmentationSpec,
    class_means: np.ndarray,
    anchor_classes: np.ndarray,
    present: np.ndarray,
    t: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sub-class loss of a fresh augmented anchor drawn from each anchor class."""
    if anchor_classes.size == 0:
        return np.empty(0)
    idx = draw_members(s.class_indices(), anchor_classes, rng)
    z = augment_rows(s.features[idx], spec, rng)
    logits = class_logits(z, class_means, t)
    return subset_cross_entropy(logits, anchor_classes, present)


# --------------------------------------------------------------------------
# bound terms


@dataclass
class BoundTerms:
    """Bound components with coefficients applied; ``None`` marks an absent slice."""

    sup_part: LossEstimate | None
    sub_part: LossEstimate | None
    collision_part: LossEstimate
    total: LossEstimate
    partial: bool
    coefficients: dict = field(default_factory=dict)
    conditional: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def enc(x):
            return None if x is None else x.to_dict()

        return {
            "sup_part": enc(self.sup_part),
            "sub_part": enc(self.sub_part),
            "collision_part": enc(self.collision_part),
            "total": enc(self.total),
            "partial": self.partial,
            "coefficients": dict(self.coefficients),
            "conditional": {k: enc(v) for k, v in self.conditional.items()},
        }


def _slice(s, spec, mu, dist, k, n, event, prob, accept, t, rng) -> LossEstimate | None:
    """Conditional mean sub-class loss; exact zero for impossible events, None if none were drawn."""
    if prob <= 0.0:
        return LossEstimate(0.0, 0.0, 0, t)
    a, _, present = sample_conditioned(dist, k, n, event, accept, rng)
    if a.size == 0:
        log.warning("conditional slice %s (probability %.3g) drew no samples for k=%d", event, prob, k)
        return None
    return LossEstimate.from_samples(score_subclass(s, spec, mu, a, present, t, rng), t)


def _combine(parts: list[tuple[float, LossEstimate | None]], d_f: LossEstimate, t: float):
    value = d_f.value
    var = d_f.stderr**2
    scaled = []
    partial = False
    for coef, est in parts:
        if est is None:
            scaled.append(None)
            partial = partial or coef > 0.0
            continue
        sc = est.scaled(coef)
        scaled.append(sc)
        value += sc.value
        var += sc.stderr**2
    return scaled, LossEstimate(value, math.sqrt(var), 0, t), partial


def _means_array(means) -> np.ndarray:
    return means.class_means if isinstance(means, MeanRepresentations) else np.asarray(means)


def evaluate_curl_bound(
    s: EmbeddingSet,
    means,
    spec: AugmentationSpec,
    k: int,
    t: float,
    n_batches: int,
    rng: np.random.Generator,
    d_f: LossEstimate | None = None,
    dist: ClassDistribution | None = None,
    levels: ClassLevel | None = None,
) -> BoundTerms:
    """Collision-probability decomposition, with the no-collision term split by coverage."""
    dist = dist or s.class_distribution()
    lv = levels or class_level(dist, k)
    mu = _means_array(means)
    d_f = d_f or gap_term_d(s, spec, 10, rng, t, class_means=mu)
    nocol = 1.0 - lv.tau
    p_cov = 0.0 if nocol <= 0.0 else lv.cover_given_nocol
    c_sup, c_sub = nocol * p_cov, nocol * (1.0 - p_cov)
    sup = _slice(s, spec, mu, dist, k, n_batches, "nocol_covers", c_sup, p_cov, t, rng)
    sub = _slice(s, spec, mu, dist, k, n_batches, "nocol_not_covers", c_sub, 1.0 - p_cov, t, rng)
    coll = LossEstimate(lv.log_col_given_col if lv.tau > 0 else 0.0, 0.0, 0, t)
    (sup_s, sub_s, coll_s), total, partial = _combine([(c_sup, sup), (c_sub, sub), (lv.tau, coll)], d_f, t)
    return BoundTerms(
        sup_s, sub_s, coll_s, total, partial,
        coefficients={"sup": c_sup, "sub": c_sub, "collision": lv.tau, "tau": lv.tau, "cover_given_nocol": p_cov},
        conditional={"sup": sup, "sub": sub, "collision": coll},
    )


def evaluate_proposed_bound(
    s: EmbeddingSet,
    means,
    spec: AugmentationSpec,
    k: int,
    t: float,
    n_batches: int,
    rng: np.random.Generator,
    d_f: LossEstimate | None = None,
    dist: ClassDistribution | None = None,
    levels: ClassLevel | None = None,
) -> BoundTerms:
    """Coverage-probability decomposition: half of sup, sub and collision terms plus the gap."""
    dist = dist or s.class_distribution()
    lv = levels or class_level(dist, k)
    mu = _means_array(means)
    d_f = d_f or gap_term_d(s, spec, 10, rng, t, class_means=mu)
    ups = lv.upsilon
    sup = _slice(s, spec, mu, dist, k, n_batches, "covers", ups, ups, t, rng)
    sub = _slice(s, spec, mu, dist, k, n_batches, "not_covers", 1.0 - ups, 1.0 - ups, t, rng)
    coll = LossEstimate(lv.log_col, 0.0, 0, t)
    (sup_s, sub_s, coll_s), total, partial = _combine(
        [(0.5 * ups, sup), (0.5 * (1.0 - ups), sub), (0.5, coll)], d_f, t
    )
    return BoundTerms(
        sup_s, sub_s, coll_s, total, partial,
        coefficients={"sup": 0.5 * ups, "sub": 0.5 * (1.0 - ups), "collision": 0.5, "upsilon": ups},
        conditional={"sup": sup, "sub": sub, "collision": coll},
    )


def collision_upper_bound(s: EmbeddingSet, spec: AugmentationSpec, rng: np.random.Generator) -> LossEstimate:
    """Empirical collision upper bound without its constants.

    ``(1/N) sum_i (1/N_{y_i}) sum_{j != i, y_j = y_i} |z_i . (z_j - z_i^+)|``
    with two independent augmentations ``z_i``, ``z_i^+`` per sample.
    """
    z = augment_rows(s.features, spec, rng)
    zp = augment_rows(s.features, spec, rng)
    counts = s.class_counts
    per = np.zeros(s.n)
    for c, rows in enumerate(s.class_indices()):
        if rows.size == 0:
            continue
        if rows.size == 1:
            log.info("class %d has a single member and contributes zero to the collision bound", c)
            continue
        zc = z[rows]
        gram = zc @ zc.T
        self_pos = np.einsum("nh,nh->n", zc, zp[rows])
        diff = np.abs(gram - self_pos[:, None])
        np.fill_diagonal(diff, 0.0)
        per[rows] = diff.sum(axis=1) / counts[c]
    return LossEstimate.from_samples(per, 1.0)


# --------------------------------------------------------------------------
# report


@dataclass
class BoundReport:
    k_plus_1: int
    temperature: float
    l_info: LossEstimate
    d_f: LossEstimate
    tau: float
    upsilon: float
    curl_terms: BoundTerms
    proposed_terms: BoundTerms
    collision_upper_bound: LossEstimate | None
    log_col: float = 0.0
    cover_given_nocol: float = 0.0
    mean_acc: float = float("nan")
    probe_acc: float = float("nan")
    extra: dict = field(default_factory=dict)
    sup_upper_bounds: dict = field(default_factory=dict)

    def combined_stderr(self, terms: BoundTerms) -> float:
        return math.sqrt(terms.total.stderr**2 + self.l_info.stderr**2)

    def csv_row(self) -> dict:
        def v(est):
            return float("nan") if est is None else est.value

        cb = self.collision_upper_bound
        return {
            "k_plus_1": self.k_plus_1,
            "tau": self.tau,
            "upsilon": self.upsilon,
            "mu_acc": self.mean_acc,
            "linear_acc": self.probe_acc,
            "L_info": self.l_info.value,
            "d_f": self.d_f.value,
            "curl_total": self.curl_terms.total.value,
            "curl_collision": self.curl_terms.collision_part.value,
            "curl_sup": v(self.curl_terms.sup_part),
            "curl_sub": v(self.curl_terms.sub_part),
            "prop_total": self.proposed_terms.total.value,
            "prop_sup": v(self.proposed_terms.sup_part),
            "prop_sub": v(self.proposed_terms.sub_part),
            "collision_bound": v(cb),
            "sup_ub_curl": self.sup_upper_bounds.get("curl_based", float("nan")),
            "sup_ub_proposed": self.sup_upper_bounds.get("proposed_based", float("nan")),
        }

    def to_dict(self) -> dict:
        return {
            "k_plus_1": self.k_plus_1,
            "temperature": self.temperature,
            "l_info": self.l_info.to_dict(),
            "d_f": self.d_f.to_dict(),
            "tau": self.tau,
            "upsilon": self.upsilon,
            "log_col": self.log_col,
            "cover_given_nocol": self.cover_given_nocol,
            "curl_terms": self.curl_terms.to_dict(),
            "proposed_terms": self.proposed_terms.to_dict(),
            "collision_upper_bound": None if self.collision_upper_bound is None else self.collision_upper_bound.to_dict(),
            "sup_upper_bounds": dict(self.sup_upper_bounds),
            "mean_acc": self.mean_acc,
            "probe_acc": self.probe_acc,
            **self.extra,
        }


def sup_upper_bound(report: BoundReport, variant: str) -> float:
    """Supervised-loss upper bound obtained by solving a lower bound for its sup term.

    Returns ``inf`` when the coefficient of the sup term vanishes and ``nan``
    when a slice needed for the rearrangement is absent.
    """
    l_info, d = report.l_info.value, report.d_f.value
    if variant == "proposed":
        ups = report.upsilon
        if ups < DENOM_FLOOR:
            return math.inf
        sub = report.proposed_terms.conditional["sub"]
        if sub is None:
            return math.nan
        return (2.0 * (l_info - d) - (1.0 - ups) * sub.value - report.log_col) / ups
    if variant == "curl":
        nocol = 1.0 - report.tau
        p_cov = report.cover_given_nocol if nocol > 0 else 0.0
        denom = nocol * p_cov
        if denom < DENOM_FLOOR:
            return math.inf
        sub = report.curl_terms.conditional["sub"]
        if sub is None:
            return math.nan
        coll = report.tau * report.curl_terms.conditional["collision"].value
        return (l_info - d - coll - nocol * (1.0 - p_cov) * sub.value) / denom
    raise ValueError(f"unknown variant {variant!r}")


def default_eval_batches(n_eval: int, k: int, epochs: int = 10) -> int:
    """Pairs a full pass over ``n_eval`` samples in groups of K+1 yields, times ``epochs``."""
    return max(1, (n_eval // (k + 1)) * (k + 1) * epochs)


def evaluate_bounds(
    eval_set: EmbeddingSet,
    means_set: EmbeddingSet,
    spec: AugmentationSpec,
    k: int,
    t: float = 1.0,
    n_batches: int | None = None,
    seed: int = 0,
    m_aug: int = 10,
    dist: ClassDistribution | None = None,
    convention: str = "k-plus-1",
    with_collision_bound: bool = True,
    accuracies: tuple[float, float] | None = None,
) -> BoundReport:
    """Full bound report for one negative-sample count.

    Class means come from ``means_set`` (the training split); losses and the
    gap term are evaluated on ``eval_set``. Random streams are keyed by
    ``seed`` and purpose, and the class means, gap term and collision bound do
    not depend on ``k``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    dist = dist or eval_set.class_distribution()
    n_batches = n_batches or default_eval_batches(eval_set.n, k)
    means = compute_class_means(means_set, spec, m_aug, stream(seed, "class-means"))
    d_f = gap_term_d(eval_set, spec, m_aug, stream(seed, "gap-term"), t, class_means=means.class_means)
    l_info = estimate_L_info(eval_set, spec, k, t, n_batches, stream(seed, "l-info", k), dist)
    lv = class_level(dist, k, convention)
    curl = evaluate_curl_bound(eval_set, means, spec, k, t, n_batches, stream(seed, "curl-slices", k), d_f, dist, lv)
    prop = evaluate_proposed_bound(
        eval_set, means, spec, k, t, n_batches, stream(seed, "proposed-slices", k), d_f, dist, lv
    )
    cb = collision_upper_bound(eval_set, spec, stream(seed, "collision-bound")) if with_collision_bound else None
    report = BoundReport(
        k_plus_1=k + 1,
        temperature=t,
        l_info=l_info,
        d_f=d_f,
        tau=lv.tau,
        upsilon=lv.upsilon,
        curl_terms=curl,
        proposed_terms=prop,
        collision_upper_bound=cb,
        log_col=lv.log_col,
        cover_given_nocol=lv.cover_given_nocol,
    )
    if accuracies is not None:
        report.mean_acc, report.probe_acc = (float(a) for a in accuracies)
    report.sup_upper_bounds = {
        "curl_based": sup_upper_bound(report, "curl"),
        "proposed_based": sup_upper_bound(report, "proposed"),
    }
    return report
