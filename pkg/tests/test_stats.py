import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmsurv.autodiff import ContractError
from mmsurv.stats import (
    FoldSignals,
    bh_fdr,
    combine_folds,
    fold_stratified_analysis,
    fold_tests,
    gating_shift,
    mann_whitney,
    normal_cdf,
    normal_quantile,
    prototype_row_tests,
    rank_biserial,
    stouffer_combine,
    within_patient_ranks,
)


def enumerate_exact_p(low, high):
    """Two-sided permutation p of U over every relabelling of the pooled sample."""
    pooled = list(low) + list(high)
    n_low, n_high = len(low), len(high)

    def u_of(lo, hi):
        return sum((a > b) + 0.5 * (a == b) for a in lo for b in hi)

    mu = n_low * n_high / 2
    observed = abs(u_of(low, high) - mu)
    hits = total = 0
    for idx in itertools.combinations(range(len(pooled)), n_low):
        chosen = set(idx)
        lo = [pooled[i] for i in idx]
        hi = [pooled[i] for i in range(len(pooled)) if i not in chosen]
        total += 1
        hits += abs(u_of(lo, hi) - mu) >= observed - 1e-12
    return hits / total


def random_folds(rng, n_folds=3, n=16, entities=5):
    return [
        FoldSignals(f, rng.normal(size=(n, entities)), rng.normal(size=n), [f"E{j}" for j in range(entities)])
        for f in range(n_folds)
    ]


class TestRanks:
    def test_examples(self):
        assert within_patient_ranks([0.1, 0.3, 0.2]).tolist() == [1, 3, 2]
        assert within_patient_ranks([5, 5]).tolist() == [1.5, 1.5]
        assert within_patient_ranks([7.0] * 4).tolist() == [2.5] * 4

    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=st.integers(-3, 3).map(float)))
    def test_row_sums(self, values):
        e = values.shape[1]
        np.testing.assert_allclose(within_patient_ranks(values).sum(axis=1), e * (e + 1) / 2)


class TestMannWhitney:
    def test_worked_example(self):
        u, p = mann_whitney([1, 2, 3], [4, 5, 6], mode="exact")
        assert u == 0.0
        assert abs(p - 0.1) < 1e-12
        assert rank_biserial(u, 3, 3) == 1.0

    def test_identical_groups(self):
        u, p = mann_whitney([1, 2, 3, 4], [1, 2, 3, 4])
        assert u == 8.0
        assert p == pytest.approx(1.0, abs=1e-12)

    @given(st.lists(st.integers(0, 5), min_size=2, max_size=6), st.lists(st.integers(0, 5), min_size=2, max_size=6))
    def test_swap_symmetry(self, low, high):
        u, p = mann_whitney(low, high)
        u2, p2 = mann_whitney(high, low)
        assert u + u2 == len(low) * len(high)
        assert p == pytest.approx(p2, abs=1e-12)

    def test_exact_matches_enumeration(self):
        rng = np.random.default_rng(4)
        for _ in range(60):
            n_low = int(rng.integers(1, 7))
            n_high = int(rng.integers(1, 13 - n_low))
            low = rng.integers(0, 6, n_low).astype(float)
            high = rng.integers(0, 6, n_high).astype(float)
            _, p = mann_whitney(low, high, mode="exact")
            assert abs(p - enumerate_exact_p(low, high)) <= 1e-12

    def test_normal_close_to_exact_for_moderate_n(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            low = rng.normal(size=10)
            high = rng.normal(0.5, 1, size=10)
            assert abs(mann_whitney(low, high)[1] - mann_whitney(low, high, mode="exact")[1]) < 0.02

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.lists(st.floats(-5, 5), min_size=1, max_size=8))
    def test_effect_sign_follows_mean_rank(self, low, high):
        ranks = within_patient_ranks(low + high)
        lo, hi = ranks[: len(low)], ranks[len(low):]
        u, _ = mann_whitney(low, high)
        r = rank_biserial(u, len(low), len(high))
        assert -1 <= r <= 1
        assert np.sign(r) == np.sign(round(hi.mean() - lo.mean(), 9))

    def test_biserial_extremes(self):
        assert rank_biserial(6, 2, 3) == -1.0
        assert rank_biserial(3, 2, 3) == 0.0


class TestNormal:
    def test_values(self):
        assert normal_cdf(0) == 0.5
        assert abs(normal_quantile(0.975) - 1.959964) < 1e-6
        with pytest.raises(ValueError):
            normal_quantile(1.0)

    def test_round_trip(self):
        for p in np.linspace(1e-6, 1 - 1e-6, 1001):
            assert abs(normal_cdf(normal_quantile(p)) - p) < 1e-9

    def test_cdf_against_quadrature(self):
        from scipy.integrate import quad

        for x in (-3.0, -1.2, 0.4, 2.5):
            ref = 0.5 + quad(lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi), 0, x)[0]
            assert abs(normal_cdf(x) - ref) < 1e-12


class TestStouffer:
    def test_two_fold_example(self):
        z, p, eff = stouffer_combine([0.05, 0.05], [0.3, 0.3], [50, 50])
        assert z == pytest.approx(2.77180, abs=1e-5)
        assert eff == pytest.approx(0.3)

    @given(st.floats(1e-6, 1), st.integers(2, 10))
    def test_equal_weight_identity(self, p, folds):
        z1 = normal_quantile(1 - max(p, 1e-15) / 2) if p < 1 else normal_quantile(1 - (1 - 1e-15) / 2)
        z, _, _ = stouffer_combine([p] * folds, [0.2] * folds, [30] * folds)
        assert abs(z - z1 * math.sqrt(folds)) < 1e-12

    def test_cancellation(self):
        z, p, _ = stouffer_combine([0.01, 0.01], [0.5, -0.5], [20, 20])
        assert z == 0.0 and p == 1.0

    def test_dominant_weight(self):
        z, _, _ = stouffer_combine([0.01, 0.9], [1, 1], [1e12, 1])
        assert z == pytest.approx(normal_quantile(1 - 0.005), rel=1e-5)

    def test_needs_two_folds(self):
        with pytest.raises(ContractError):
            stouffer_combine([0.1], [0.1], [10])


class TestBH:
    def test_worked_example(self):
        q, sig = bh_fdr([0.01, 0.02, 0.03, 0.04])
        np.testing.assert_allclose(q, [0.04] * 4, rtol=0, atol=1e-15)
        assert sig.all()

    def test_trivial(self):
        q, sig = bh_fdr([1.0, 1.0])
        assert q.tolist() == [1.0, 1.0] and not sig.any()
        assert bh_fdr([0.3])[0].tolist() == [0.3]

    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(0, 1)), st.floats(0, 0.5), st.floats(0, 0.5))
    def test_monotone_in_alpha(self, p, a, b):
        lo, hi = sorted((a, b))
        assert np.all(bh_fdr(p, lo)[1] <= bh_fdr(p, hi)[1])


class TestAnalysis:
    def test_identical_distributions(self):
        values = np.tile([[1.0, 2.0, 3.0]], (8, 1))
        res = fold_tests(FoldSignals(0, values, np.arange(8.0), ["a", "b", "c"]))
        assert all(r.p == pytest.approx(1.0) and r.r == 0 for r in res)

    def test_small_group_excluded(self):
        folds = [FoldSignals(0, np.zeros((3, 2)), np.array([1.0, 2, 3])), FoldSignals(1, np.random.default_rng(0).normal(size=(6, 2)), np.arange(6.0))]
        out = fold_stratified_analysis(folds, "pathway_gate")
        assert out.excluded_folds == [0]
        assert all(m.combinable is False for m in out.meta)

    def test_pathway_kinds_are_combined(self):
        out = fold_stratified_analysis(random_folds(np.random.default_rng(1)), "pathway_gate")
        assert [m.entity for m in out.meta] == [f"E{j}" for j in range(5)]
        assert all(m.folds_used == 3 and 0 < m.q <= 1 for m in out.meta)

    @pytest.mark.parametrize("kind", ["prototype_gate", "fusion_gate", "cross_attention_row"])
    def test_prototype_kinds_never_combined(self, kind):
        folds = random_folds(np.random.default_rng(2))
        out = fold_stratified_analysis(folds, kind)
        assert out.meta is None
        assert {r.fold for r in out.per_fold} == {0, 1, 2}
        with pytest.raises(ContractError):
            fold_stratified_analysis(folds, kind, combine=True)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            fold_stratified_analysis([], "nonsense")

    def test_monotone_transform_invariance(self):
        folds = random_folds(np.random.default_rng(3))
        moved = [FoldSignals(f.fold, np.exp(f.values), f.risks, f.entities) for f in folds]
        a = fold_stratified_analysis(folds, "gene_importance")
        b = fold_stratified_analysis(moved, "gene_importance")
        assert a.per_fold == b.per_fold
        assert [(m.z, m.p, m.q) for m in a.meta] == [(m.z, m.p, m.q) for m in b.meta]

    def test_combine_single_fold_entity_flagged(self):
        rows = fold_tests(FoldSignals(0, np.random.default_rng(0).normal(size=(6, 2)), np.arange(6.0), ["x", "y"]))
        meta = combine_folds(rows, {0: 6})
        assert all(not m.combinable and m.folds_used == 1 for m in meta)

    def test_prototype_rows(self):
        rng = np.random.default_rng(5)
        out = prototype_row_tests(rng.random((10, 3, 4)), rng.normal(size=10), ["a", "b", "c", "d"], fold=2)
        assert sorted(out) == [0, 1, 2]
        assert all(len(v) == 4 and v[0].fold == 2 for v in out.values())


class TestGatingShift:
    def test_reversed(self):
        res = gating_shift([[0.2, 0.3, 0.5]], [[0.5, 0.3, 0.2]], [1.0])
        assert res.delta.tolist() == [[2.0, 0.0, -2.0]]
        assert res.tests == []

    @settings(deadline=None)
    @given(st.integers(0, 10_000))
    def test_identity_and_rank_sum(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.dirichlet(np.ones(4), size=6)
        b = rng.dirichlet(np.ones(4), size=6)
        assert not gating_shift(a, a, rng.normal(size=6)).delta.any()
        res = gating_shift(a, b, rng.normal(size=6))
        np.testing.assert_allclose(res.delta.sum(axis=1), 0, atol=1e-12)
        assert len(res.tests) == 4
