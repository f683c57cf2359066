"""Class-level probabilities: collisions, coupon-collector coverage, expected draws.

Everything here depends only on the latent-class distribution, never on
embeddings. Exact methods are used wherever they exist; Monte-Carlo estimates
exist as independent oracles and for cases without a tractable exact form.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import integrate

from .errors import NumericalError
from .rng import default_threads, stream

METHODS = ("closed_form", "dp", "inclusion_exclusion", "quadrature", "monte_carlo")
DRAWS_CONVENTIONS = ("k", "k-plus-1")

# inclusion-exclusion in floating point is refused beyond this many lost digits
MAX_LOST_DIGITS = 6.0
# work limit (classes * draws**2) for the exact non-uniform coverage DP
NONUNIFORM_DP_BUDGET = 4e8


@dataclass(frozen=True)
class ClassDistribution:
    """Probability vector over latent classes."""

    probs: tuple[float, ...]

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "probs", probs)
        if len(probs) < 1:
            raise ValueError("a class distribution needs at least one class")
        for i, p in enumerate(probs):
            if not (0.0 < p <= 1.0) or not math.isfinite(p):
                raise ValueError(f"class {i} has probability {p!r}; entries must lie in (0, 1]")
        total = math.fsum(probs)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {total!r}, expected 1 within 1e-12")

    @classmethod
    def uniform(cls, n_classes: int) -> "ClassDistribution":
        if n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        return cls((1.0 / n_classes,) * n_classes)

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "ClassDistribution":
        counts = [int(c) for c in counts]
        if any(c <= 0 for c in counts):
            raise ValueError("every class needs a positive count")
        total = sum(counts)
        if all(c == counts[0] for c in counts):
            return cls.uniform(len(counts))
        return cls(tuple(c / total for c in counts))

    @property
    def n_classes(self) -> int:
        return len(self.probs)

    @property
    def is_uniform(self) -> bool:
        p0 = self.probs[0]
        return all(abs(p - p0) <= 1e-12 for p in self.probs)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=np.float64)


@dataclass(frozen=True)
class ProbEstimate:
    value: float
    stderr: float = 0.0
    method: str = "closed_form"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.stderr < 0:
            raise ValueError("stderr must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def draws_for(k: int, convention: str = "k-plus-1") -> int:
    """Number of class draws implied by ``k`` negatives under a convention."""
    if convention not in DRAWS_CONVENTIONS:
        raise ValueError(f"unknown draws convention {convention!r}")
    return k + 1 if convention == "k-plus-1" else k


# --------------------------------------------------------------------------
# collisions


def collision_probability(dist: ClassDistribution, k: int) -> ProbEstimate:
    """P(at least one of ``k`` negatives shares the anchor's class)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return ProbEstimate(0.0, 0.0, "closed_form")
    if dist.is_uniform:
        n = dist.n_classes
        return ProbEstimate(-math.expm1(k * math.log1p(-1.0 / n)) if n > 1 else 1.0)
    no_col = math.fsum(p * (1.0 - p) ** k for p in dist.probs)
    return ProbEstimate(1.0 - no_col)


def collision_pmf(dist: ClassDistribution, k: int) -> np.ndarray:
    """Distribution of the collision count, length ``k + 1``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    j = np.arange(k + 1)
    log_binom = _log_comb_array(k, j)
    out = np.zeros(k + 1)
    for p in dist.probs:
        if p == 1.0:
            term = np.zeros(k + 1)
            term[k] = 1.0
        else:
            term = np.exp(log_binom + j * math.log(p) + (k - j) * math.log1p(-p))
        out += p * term
    return out


def expected_log_collision(dist: ClassDistribution, k: int, given_collision: bool = False) -> float:
    """E[ln(Col + 1)], optionally conditioned on Col != 0."""
    pmf = collision_pmf(dist, k)
    vals = np.log1p(np.arange(k + 1))
    total = math.fsum(pmf * vals)
    if not given_collision:
        return total
    tau = collision_probability(dist, k).value
    if tau <= 0.0:
        return float("nan")
    return total / tau


# --------------------------------------------------------------------------
# coverage (coupon collector)


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _log_comb_array(n: int, k: np.ndarray) -> np.ndarray:
    from scipy.special import gammaln

    k = np.asarray(k, dtype=np.float64)
    return gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)


def _collected_count_chain(n: int, steps: int) -> np.ndarray:
    """Distribution over number of distinct classes seen, after each draw.

    Row ``d`` holds P(#distinct = j) after ``d`` uniform draws, j = 0..n.
    """
    out = np.zeros((steps + 1, n + 1))
    state = np.zeros(n + 1)
    state[0] = 1.0
    out[0] = state
    j = np.arange(n + 1)
    stay = j / n
    move = (n - j) / n
    for d in range(1, steps + 1):
        nxt = state * stay
        nxt[1:] += state[:-1] * move[:-1]
        state = nxt
        out[d] = state
    return out


def coverage_dp(n_classes: int, draws: int) -> float:
    """Uniform coverage probability from the collected-count Markov chain."""
    if draws < n_classes:
        return 0.0
    n = n_classes
    state = np.zeros(n + 1)
    state[0] = 1.0
    j = np.arange(n + 1)
    stay = j / n
    move = (n - j) / n
    for _ in range(draws):
        nxt = state * stay
        nxt[1:] += state[:-1] * move[:-1]
        state = nxt
    return float(state[n])


def coverage_inclusion_exclusion(n_classes: int, draws: int, exact: bool | None = None) -> float:
    """Uniform coverage probability by inclusion-exclusion.

    With ``exact=False`` the alternating sum is formed in floating point from
    log-space binomials and refused if cancellation eats more than
    ``MAX_LOST_DIGITS`` digits. With ``exact=True`` it is summed in integer
    arithmetic. ``None`` tries floating point and falls back to integers.
    """
    n = n_classes
    if draws < n:
        return 0.0
    if exact is not True:
        try:
            return _coverage_ie_float(n, draws)
        except NumericalError:
            if exact is False:
                raise
    num = sum((-1) ** m * math.comb(n, m) * (n - m) ** draws for m in range(n + 1))
    return float(Fraction(num, n**draws))


def _coverage_ie_float(n: int, draws: int) -> float:
    terms = []
    for m in range(n + 1):
        if m == n:
            mag = 1.0 if draws == 0 else 0.0
        else:
            mag = math.exp(_log_comb(n, m) + draws * math.log1p(-m / n))
        terms.append(-mag if m % 2 else mag)
    total = math.fsum(terms)
    biggest = max(abs(t) for t in terms)
    if total <= 0.0 or math.log10(biggest / total) > MAX_LOST_DIGITS:
        raise NumericalError(
            f"inclusion-exclusion for {n} classes and {draws} draws loses more than "
            f"{MAX_LOST_DIGITS:g} digits to cancellation (largest term {biggest:.3g}, sum {total:.3g})"
        )
    return total


def coverage_nonuniform_dp(probs: Sequence[float], draws: int) -> float:
    """Exact coverage probability for arbitrary class probabilities.

    Folds classes in one at a time, tracking for each total m the probability
    mass of m draws that hit every class folded so far at least once. All terms
    are non-negative, so there is no cancellation.
    """
    probs = [float(p) for p in probs]
    n = len(probs)
    if draws < n:
        return 0.0
    from scipy.special import gammaln

    m = np.arange(draws + 1, dtype=np.float64)
    # log C(m, j) for all 0 <= j <= m, masked above the diagonal
    mm, jj = np.meshgrid(m, m, indexing="ij")
    valid = jj <= mm
    log_c = np.where(valid, gammaln(mm + 1) - gammaln(jj + 1) - gammaln(np.maximum(mm - jj, 0) + 1), -np.inf)
    idx = (mm - jj).astype(np.int64)
    idx[~valid] = 0
    b = np.zeros(draws + 1)
    b[0] = 1.0
    for r in probs:
        weights = np.where(valid & (jj >= 1), np.exp(log_c + jj * math.log(r)), 0.0)
        b = (weights * b[idx]).sum(axis=1)
    return float(b[draws])


def all_classes_probability(
    dist: ClassDistribution,
    draws: int,
    method: str = "auto",
    trials: int = 1_000_000,
    seed: int = 0,
    threads: int | None = None,
) -> ProbEstimate:
    """P(``draws`` i.i.d. class draws cover every class).

    ``method`` is one of ``auto``, ``dp``, ``ie`` or ``mc``. In ``auto`` mode
    the uniform case uses the chain DP and cross-checks it against
    inclusion-exclusion.
    """
    if draws < 0:
        raise ValueError("draws must be >= 0")
    if method not in ("auto", "dp", "ie", "mc"):
        raise ValueError(f"unknown method {method!r}")
    n = dist.n_classes
    if method == "mc":
        return mc_all_classes(dist, draws, trials, seed, threads=threads)
    if dist.is_uniform:
        if method == "ie":
            return ProbEstimate(coverage_inclusion_exclusion(n, draws, exact=False), 0.0, "inclusion_exclusion")
        value = coverage_dp(n, draws)
        if method == "auto":
            check = coverage_inclusion_exclusion(n, draws)
            if abs(check - value) > 1e-10:
                raise NumericalError(
                    f"coverage DP ({value!r}) and inclusion-exclusion ({check!r}) disagree "
                    f"for {n} classes, {draws} draws"
                )
        return ProbEstimate(value, 0.0, "dp")
    if method == "ie":
        raise ValueError("inclusion-exclusion is only implemented for uniform distributions")
    if draws < n:
        return ProbEstimate(0.0, 0.0, "dp")
    if n * (draws + 1) ** 2 > NONUNIFORM_DP_BUDGET:
        if method == "dp":
            raise NumericalError(f"coverage DP for {n} classes and {draws} draws exceeds the work budget")
        return mc_all_classes(dist, draws, trials, seed, threads=threads)
    return ProbEstimate(coverage_nonuniform_dp(dist.probs, draws), 0.0, "dp")


def coupon_pmf(dist: ClassDistribution, n: int, method: str = "dp") -> float:
    """P(the last new class appears exactly at draw ``n``), uniform classes only."""
    if not dist.is_uniform:
        raise ValueError("coupon_pmf requires a uniform distribution")
    if n < 1:
        raise ValueError("n must be >= 1")
    c = dist.n_classes
    if method == "dp":
        chain = _collected_count_chain(c, n - 1)
        return float(chain[n - 1, c - 1] / c)
    if method == "ie":
        num = sum((-1) ** m * math.comb(c - 1, m) * (c - m - 1) ** (n - 1) for m in range(c))
        return float(Fraction(num, c ** (n - 1)))
    raise ValueError(f"unknown method {method!r}")


def coupon_pmf_sequence(dist: ClassDistribution, n_max: int) -> np.ndarray:
    """``coupon_pmf`` for n = 1..n_max in one pass (index 0 is n = 1)."""
    if not dist.is_uniform:
        raise ValueError("coupon_pmf requires a uniform distribution")
    c = dist.n_classes
    chain = _collected_count_chain(c, max(n_max - 1, 0))
    return chain[:n_max, c - 1] / c


def coverage_given_no_collision(dist: ClassDistribution, k: int) -> float:
    """P(anchor class plus ``k`` negatives cover every class | no negative collides)."""
    n = dist.n_classes
    probs = dist.probs
    if k == 0:
        return 1.0 if n == 1 else 0.0
    if n == 1:
        return float("nan")
    if dist.is_uniform:
        return all_classes_probability(ClassDistribution.uniform(n - 1), k, method="dp").value
    weights, covers = [], []
    for c, p in enumerate(probs):
        rest = [q for i, q in enumerate(probs) if i != c]
        s = math.fsum(rest)
        sub = ClassDistribution(tuple(q / s for q in rest))
        weights.append(p * (1.0 - p) ** k)
        covers.append(all_classes_probability(sub, k, method="dp").value)
    total = math.fsum(weights)
    return math.fsum(w * v for w, v in zip(weights, covers)) / total


# --------------------------------------------------------------------------
# expected number of draws


def harmonic(n: int) -> float:
    return math.fsum(1.0 / i for i in range(1, n + 1))


def expected_draws(dist: ClassDistribution, tol: float = 1e-8) -> float:
    """Expected number of draws until every class has appeared.

    Integrates ``1 - prod_c (1 - exp(-rho_c x))`` over ``x >= 0`` after the
    change of variables ``u = exp(-x / s)`` with ``s = 1 / min rho``, which maps
    the half line onto (0, 1) with a bounded integrand.
    """
    probs = dist.as_array()
    s = 1.0 / probs.min()
    expo = s * probs

    def integrand(u: float) -> float:
        if u <= 0.0:
            return s * float(np.count_nonzero(np.isclose(expo, 1.0)))
        log_prod = np.log1p(-np.power(u, expo)).sum()
        return s * -math.expm1(log_prod) / u

    # break (0, 1) geometrically so the narrow feature near u ~ 1/n is resolved
    n = len(probs)
    edges = [0.0]
    e = 1.0 / (16.0 * max(n, 1))
    while e < 1.0:
        edges.append(e)
        e *= 4.0
    edges.append(1.0)
    pieces, errors = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        val, err = integrate.quad(integrand, a, b, epsabs=tol / len(edges), epsrel=1e-13, limit=400)
        pieces.append(val)
        errors.append(err)
    achieved = math.fsum(errors)
    if achieved > tol * 10:
        raise NumericalError(f"quadrature did not converge: estimated error {achieved:.3g} > {tol:g}")
    return math.fsum(pieces)


def expected_draws_ceil(dist: ClassDistribution) -> int:
    # guard against 8.000000000001-style quadrature noise on integral values
    return math.ceil(round(expected_draws(dist), 9))


def expected_draws_closed_form(n_classes: int) -> float:
    return n_classes * harmonic(n_classes)


# --------------------------------------------------------------------------
# Monte Carlo oracles


def _split(total: int, parts: int) -> list[int]:
    parts = max(1, min(parts, total)) if total > 0 else 1
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def sample_stopping_times(probs: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw the number of draws needed to see every class.

    The waiting time for the next new class is geometric with success
    probability equal to the mass of unseen classes; which class arrives is
    drawn proportionally to the unseen masses.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.size
    t = np.zeros(size, dtype=np.int64)
    if np.allclose(probs, probs[0], rtol=0, atol=1e-12):
        for j in range(n):
            t += rng.geometric((n - j) / n, size=size)
        return t
    seen = np.zeros((size, n), dtype=bool)
    rows = np.arange(size)
    for _ in range(n):
        w = np.where(seen, 0.0, probs)
        cdf = np.cumsum(w, axis=1)
        mass = cdf[:, -1]
        t += rng.geometric(np.clip(mass, 1e-300, 1.0))
        u = rng.random(size) * mass
        pick = np.minimum((cdf <= u[:, None]).sum(axis=1), n - 1)
        seen[rows, pick] = True
    return t


def mc_stopping_times(
    dist: ClassDistribution,
    trials: int,
    seed: int,
    shards: int = 16,
    threads: int | None = None,
) -> np.ndarray:
    """Stopping-time samples; identical for a given (seed, shards) at any thread count."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    sizes = _split(trials, shards)
    probs = dist.as_array()

    def run(i: int) -> np.ndarray:
        return sample_stopping_times(probs, sizes[i], stream(seed, "mc-coverage", i))

    threads = threads or default_threads()
    if threads == 1 or len(sizes) == 1:
        parts = [run(i) for i in range(len(sizes))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    return np.concatenate(parts)


def mc_all_classes(
    dist: ClassDistribution,
    draws: int,
    trials: int = 1_000_000,
    seed: int = 0,
    shards: int = 16,
    threads: int | None = None,
) -> ProbEstimate:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if draws < dist.n_classes:
        return ProbEstimate(0.0, 0.0, "monte_carlo")
    times = mc_stopping_times(dist, trials, seed, shards, threads)
    hits = int(np.count_nonzero(times <= draws))
    p = hits / trials
    return ProbEstimate(p, math.sqrt(p * (1.0 - p) / trials), "monte_carlo")


def mc_expected_draws(
    dist: ClassDistribution, trials: int, seed: int, threads: int | None = None
) -> tuple[float, float]:
    """Monte-Carlo mean of the stopping time and its standard error."""
    times = mc_stopping_times(dist, trials, seed, threads=threads).astype(np.float64)
    return float(times.mean()), float(times.std(ddof=1) / math.sqrt(trials))


def simulate_coverage(dist: ClassDistribution, draws: int, trials: int, rng: np.random.Generator) -> float:
    """Direct simulation: draw ``draws`` classes per trial and check coverage."""
    n = dist.n_classes
    hits = 0
    chunk = max(1, min(trials, 2_000_000 // max(draws, 1)))
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        seen = np.zeros((m, n), dtype=bool)
        if draws:
            labels = rng.choice(n, size=(m, draws), p=dist.as_array())
            seen[np.repeat(np.arange(m), draws), labels.ravel()] = True
        hits += int(seen.all(axis=1).sum())
        done += m
    return hits / trials
