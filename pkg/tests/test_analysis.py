import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from negbound.analysis import (
    Histogram,
    histogram,
    norm_histogram,
    relative_change_curve,
    shared_norm_range,
    stationarity_residual,
    subclass_gradient,
    subclass_loss,
    subset_family,
    verify_uniform_optimum,
    wasserstein1,
    within_class_cosine_histogram,
    within_class_cosines,
)
from negbound.datamodel import EmbeddingSet
from negbound.errors import NumericalError
from negbound.losses import logsumexp


class TestHistogram:
    def test_invariants(self):
        with pytest.raises(ValueError):
            Histogram(np.array([0.0, 1.0]), np.array([1, 2]))
        with pytest.raises(ValueError):
            Histogram(np.array([1.0, 0.0]), np.array([1]))
        with pytest.raises(ValueError):
            Histogram(np.array([0.0, 1.0]), np.array([-1]))

    def test_total(self):
        h = histogram([0.1, 0.2, 0.9], 2, (0.0, 1.0))
        assert h.total == 3 and h.counts.tolist() == [2, 1]


class TestCosineHistogram:
    def test_identical_members(self):
        s = EmbeddingSet(np.tile([0.6, 0.8], (5, 1)), [0] * 5, 1, normalized=True)
        h = within_class_cosine_histogram(s, 0)
        assert h.total == 10
        assert h.counts[-1] == 10 and h.bin_edges[-1] == 1.0

    def test_two_orthonormal(self):
        s = EmbeddingSet(np.eye(2), [0, 0], 1, normalized=True)
        assert within_class_cosines(s, 0).tolist() == [0.0]
        assert within_class_cosine_histogram(s, 0).total == 1

    def test_three_members(self):
        a = np.array([1.0, 0.0])
        b = np.array([0.5, math.sqrt(3) / 2])
        s = EmbeddingSet(np.vstack([a, b, b]), [0, 0, 0], 1, normalized=True)
        cos = np.sort(within_class_cosines(s, 0))
        assert cos == pytest.approx([0.5, 0.5, 1.0])
        assert within_class_cosine_histogram(s, 0).total == 3

    def test_default_bins_square_root(self):
        x = np.random.default_rng(0).normal(size=(12, 3))
        s = EmbeddingSet(x, [0] * 12, 1)
        h = within_class_cosine_histogram(s, 0)
        assert h.counts.size == math.isqrt(66)
        assert h.bin_edges[0] == -1.0 and h.bin_edges[-1] == 1.0

    def test_singleton_class(self):
        s = EmbeddingSet(np.eye(2), [0, 1], 2, normalized=True)
        with pytest.raises(ValueError, match="class 1"):
            within_class_cosine_histogram(s, 1)


class TestNormHistogram:
    def test_three_rows(self):
        s = EmbeddingSet(np.array([[3.0, 0.0], [0.0, 4.0], [3.0, 4.0]]), [0, 0, 0], 1)
        assert norm_histogram(s).total == 3

    def test_equal_norms_one_bin(self):
        s = EmbeddingSet(np.array([[2.0, 0.0], [0.0, 2.0], [0.0, -2.0], [2.0, 0.0]]), [0] * 4, 1)
        h = norm_histogram(s)
        assert np.count_nonzero(h.counts) == 1

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            norm_histogram(EmbeddingSet(np.zeros((0, 2)), np.zeros(0, int), 1))

    def test_normalized_rejected(self):
        with pytest.raises(ValueError):
            norm_histogram(EmbeddingSet(np.eye(2), [0, 0], 1, normalized=True))

    def test_shared_range(self):
        a = EmbeddingSet(np.array([[1.0, 0.0], [2.0, 0.0]]), [0, 0], 1)
        b = EmbeddingSet(np.array([[5.0, 0.0], [3.0, 0.0]]), [0, 0], 1)
        r = shared_norm_range([a, b])
        assert r == (1.0, 5.0)
        assert np.array_equal(norm_histogram(a, r).bin_edges, norm_histogram(b, r).bin_edges)


class TestWasserstein:
    def test_identical(self):
        h = histogram([0.1, 0.5, 0.7], 4, (0.0, 1.0))
        assert wasserstein1(h, h) == 0.0

    def test_unit_transport(self):
        edges = np.array([-0.5, 0.5, 1.5])
        assert wasserstein1(Histogram(edges, [1, 0]), Histogram(edges, [0, 1])) == pytest.approx(1.0)

    def test_one_bin_shift(self):
        edges = np.linspace(0.0, 1.0, 11)
        a = Histogram(edges, [0, 3, 1, 0, 0, 0, 0, 0, 0, 0])
        b = Histogram(edges, [0, 0, 3, 1, 0, 0, 0, 0, 0, 0])
        assert wasserstein1(a, b) == pytest.approx(0.1, abs=1e-15)

    def test_edge_mismatch(self):
        with pytest.raises(ValueError):
            wasserstein1(histogram([0.1], 2, (0, 1)), histogram([0.1], 3, (0, 1)))

    def test_empty_rejected(self):
        h = Histogram(np.array([0.0, 1.0]), [0])
        with pytest.raises(ValueError):
            wasserstein1(h, h)

    def test_matches_scipy_on_midpoints(self):
        from scipy.stats import wasserstein_distance

        rng = np.random.default_rng(1)
        a = histogram(rng.normal(size=300), 15, (-4, 4))
        b = histogram(rng.normal(0.5, 1.2, size=200), 15, (-4, 4))
        ref = wasserstein_distance(a.midpoints, b.midpoints, a.counts, b.counts)
        assert wasserstein1(a, b) == pytest.approx(ref, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.integers(0, 9), min_size=6, max_size=6).filter(lambda c: sum(c) > 0), min_size=3, max_size=3))
def test_w1_is_metric(counts):
    edges = np.linspace(0.0, 3.0, 7)
    a, b, c = (Histogram(edges, x) for x in counts)
    assert wasserstein1(a, b) == pytest.approx(wasserstein1(b, a), abs=1e-15)
    assert wasserstein1(a, c) <= wasserstein1(a, b) + wasserstein1(b, c) + 1e-12
    assert wasserstein1(a, b) >= 0


class TestRelativeChange:
    def test_reference_first(self):
        assert relative_change_curve(0.4, [0.4, 0.8, 0.4]) == [1.0, 2.0, 1.0]

    def test_zero_reference(self):
        with pytest.raises(ValueError):
            relative_change_curve(0.0, [1.0])


class TestUniformOptimum:
    def test_pairs_have_loss_ln2_at_uniform(self):
        fam = subset_family(3, 1)
        sizes = fam.masks.sum(axis=1)
        pairs = fam.masks[sizes == 2]
        q = np.zeros(3)
        for m in pairs:
            # anchor score is 0 at the uniform vector
            assert logsumexp(np.where(m, q, -np.inf)) == pytest.approx(math.log(2))

    def test_family_weights(self):
        fam = subset_family(3, 2)
        assert fam.exact and fam.weights.sum() == pytest.approx(1.0)
        # anchor 0 alone: probability (1/3)^3
        single = (fam.anchors == 0) & (fam.masks.sum(axis=1) == 1)
        assert fam.weights[single].sum() == pytest.approx(1 / 27)

    def test_converges_three_classes(self):
        r = verify_uniform_optimum(3, 1)
        assert r.spread < 1e-4 and r.exact

    def test_shift_invariance(self):
        fam = subset_family(4, 3)
        q = np.random.default_rng(2).normal(size=4)
        assert subclass_loss(q + 3.7, fam) == pytest.approx(subclass_loss(q, fam), abs=1e-12)

    def test_gradient_finite_differences(self):
        fam = subset_family(4, 2)
        q = np.random.default_rng(3).normal(size=4)
        g = subclass_gradient(q, fam)
        eps = 1e-6
        for j in range(4):
            e = np.zeros(4)
            e[j] = eps
            num = (subclass_loss(q + e, fam) - subclass_loss(q - e, fam)) / (2 * eps)
            assert g[j] == pytest.approx(num, abs=1e-8)

    @pytest.mark.parametrize("c", [3, 4, 5])
    @pytest.mark.parametrize("k", [1, 2, 4, 6])
    def test_uniform_is_stationary(self, c, k):
        fam = subset_family(c, k)
        assert np.abs(stationarity_residual(np.zeros(c), fam)).max() < 1e-10
        assert np.linalg.norm(subclass_gradient(np.zeros(c), fam)) < 1e-10

    def test_sampled_family_for_large_inputs(self):
        fam = subset_family(8, 3, samples=20_000)
        assert not fam.exact and fam.weights.sum() == pytest.approx(1.0)

    def test_step_budget(self):
        with pytest.raises(NumericalError):
            verify_uniform_optimum(4, 2, steps=2)
