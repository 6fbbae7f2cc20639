"""Bubble metrics against hand-computed and exhaustive oracles."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ucrs import detect
from ucrs.detect import (BubbleReport, bias_amplification_report, coverage,
                         dis_euc, exposure_counts, isolation_index, mcd,
                         ndcg_at_k, pairwise_isolation, recall_at_k, severity,
                         tcd, w_ndcg_at_k)

CATS = np.asarray([
    [1, 0, 0, 0],
    [1, 0, 0, 0],
    [0, 1, 0, 0],
    [0, 0, 1, 0],
    [1, 1, 0, 0],
    [0, 0, 0, 1],
], dtype=np.uint8)


class TestCoverage:
    def test_single_category(self):
        assert coverage([0, 1], CATS) == 1.0

    def test_all_distinct(self):
        assert coverage([0, 2, 3, 5], CATS) == 4.0

    def test_multilabel_union_oracle(self):
        items = [0, 2, 4]
        union = set()
        for i in items:
            union |= set(np.flatnonzero(CATS[i]).tolist())
        assert coverage(items, CATS) == len(union) == 2


class TestIsolationIndex:
    def test_identical_groups_zero(self):
        e = np.asarray([3, 1, 0, 2], dtype=float)
        assert isolation_index(e, e) == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_groups_one(self):
        a = np.asarray([2, 0], dtype=float)
        b = np.asarray([0, 5], dtype=float)
        assert isolation_index(a, b) == pytest.approx(1.0, abs=1e-12)

    def test_hand_evaluated_example(self):
        # a = {i1: 2, i2: 1}, b = {i1: 1, i2: 2} -> s = 5/9 - 4/9 = 1/9
        a = np.asarray([2, 1], dtype=float)
        b = np.asarray([1, 2], dtype=float)
        assert isolation_index(a, b) == pytest.approx(1.0 / 9.0, abs=1e-12)

    def test_empty_group_errors(self):
        with pytest.raises(ValueError):
            isolation_index(np.zeros(3), np.ones(3))

    def test_zero_joint_exposure_items_skipped(self):
        a = np.asarray([1, 0, 0], dtype=float)
        b = np.asarray([1, 0, 0], dtype=float)
        assert isolation_index(a, b) == pytest.approx(0.0, abs=1e-12)

    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)),
                    min_size=1, max_size=30))
    @settings(max_examples=300, deadline=None)
    def test_stays_in_unit_interval(self, counts):
        a = np.asarray([c[0] for c in counts], dtype=float)
        b = np.asarray([c[1] for c in counts], dtype=float)
        if a.sum() == 0 or b.sum() == 0:
            return
        s = isolation_index(a, b)
        assert -1e-12 <= s <= 1.0 + 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        a = rng.integers(0, 10, 20).astype(float)
        b = rng.integers(0, 10, 20).astype(float)
        a[0] += 1
        perm = rng.permutation(20)
        assert isolation_index(a, b) == pytest.approx(
            isolation_index(a[perm], b[perm]), abs=1e-12
        )


class TestPairwiseIsolation:
    def test_two_groups_equals_single(self):
        a = np.asarray([2, 1], dtype=float)
        b = np.asarray([1, 2], dtype=float)
        assert pairwise_isolation([a, b]) == isolation_index(a, b)

    def test_three_identical_groups_zero(self):
        e = np.asarray([1, 2, 3], dtype=float)
        assert pairwise_isolation([e, e, e]) == pytest.approx(0.0, abs=1e-12)

    def test_three_groups_enumerated_oracle(self):
        rng = np.random.default_rng(1)
        groups = [rng.integers(1, 6, 8).astype(float) for _ in range(3)]
        expected = np.mean([
            isolation_index(groups[0], groups[1]),
            isolation_index(groups[0], groups[2]),
            isolation_index(groups[1], groups[2]),
        ])
        assert pairwise_isolation(groups) == pytest.approx(expected, abs=1e-12)


class TestMcdTcd:
    def test_slate_entirely_majority(self):
        # history all category 0; slate of items carrying category 0
        assert mcd([0, 1, 4], [0, 1], CATS) == 1.0

    def test_slate_disjoint_from_majority(self):
        assert mcd([2, 3, 5], [0, 1], CATS) == 0.0

    def test_empty_history_errors(self):
        with pytest.raises(ValueError):
            mcd([0], [], CATS)

    def test_tcd_full_and_none(self):
        assert tcd([0, 1, 4], 0, CATS) == 1.0
        assert tcd([2, 3], 0, CATS) == 0.0
        assert tcd([0, 2], 0, CATS) == 0.5

    def test_permuting_item_indices_invariant(self):
        perm = np.asarray([3, 0, 5, 1, 4, 2])
        inv = np.argsort(perm)
        cats_perm = CATS[perm]
        slate, hist = [0, 2, 4], [0, 1]
        assert mcd(slate, hist, CATS) == mcd(inv[slate], inv[hist], cats_perm)
        assert coverage(slate, CATS) == coverage(inv[slate], cats_perm)


class TestDisEuc:
    def test_at_target_group(self):
        g_orig = np.asarray([1.0, 0.0])
        g_tgt = np.asarray([0.0, 1.0])
        d = g_tgt
        assert dis_euc(d, g_orig, g_tgt) == pytest.approx(
            -np.linalg.norm(g_tgt - g_orig), abs=1e-12
        )

    def test_all_equal_zero(self):
        d = np.asarray([0.5, 0.5])
        assert dis_euc(d, d, d) == 0.0

    def test_random_vectors_norm_oracle(self):
        rng = np.random.default_rng(2)
        d, g1, g2 = rng.random((3, 3))
        expected = math.dist(d, g2) - math.dist(d, g1)
        assert dis_euc(d, g1, g2) == pytest.approx(expected, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            dis_euc(np.ones(2), np.ones(3), np.ones(3))


def brute_force_dcg(items, gains_by_item):
    return sum(gains_by_item.get(int(i), 0.0) / math.log2(r + 2)
               for r, i in enumerate(items))


def brute_force_best_dcg(universe, gains_by_item, k):
    best = 0.0
    for perm in itertools.permutations(universe, min(k, len(universe))):
        best = max(best, brute_force_dcg(perm, gains_by_item))
    return best


class TestRankingMetrics:
    def test_perfect_slate(self):
        assert recall_at_k([1, 2], [1, 2]) == 1.0
        assert ndcg_at_k([1, 2], [1, 2]) == 1.0

    def test_no_hits(self):
        assert recall_at_k([3, 4], [1, 2]) == 0.0
        assert ndcg_at_k([3, 4], [1, 2]) == 0.0

    def test_recall_counts_fraction(self):
        assert recall_at_k([1, 9, 8], [1, 2, 3, 4]) == 0.25

    def test_ndcg_exhaustive_5_item_universe(self):
        universe = list(range(5))
        positives = [1, 3]
        gains = {1: 1.0, 3: 1.0}
        k = 3
        for slate in itertools.permutations(universe, k):
            expected = brute_force_dcg(slate, gains) / brute_force_best_dcg(universe, gains, k)
            assert ndcg_at_k(list(slate), positives) == pytest.approx(expected, abs=1e-12)

    def test_empty_positives_raise_for_skipping(self):
        with pytest.raises(ValueError):
            recall_at_k([1], [])
        with pytest.raises(ValueError):
            ndcg_at_k([1], [])


class TestWeightedNdcg:
    cats = CATS

    def test_all_target_positives_perfect(self):
        # positives {0, 1} both in target category 0, ranked on top
        assert w_ndcg_at_k([0, 1, 3], [0, 1], 0, self.cats) == 1.0

    def test_positives_outside_target_below_one(self):
        # positives {2, 3} not in category 0: best achievable ordering still
        # scores 1.0 against its own ideal (no 2-gain items exist)
        value = w_ndcg_at_k([2, 3, 5], [2, 3], 0, self.cats)
        assert value == pytest.approx(1.0, abs=1e-12)
        # but with a target positive ranked below a non-target one, < 1
        value = w_ndcg_at_k([2, 0, 5], [0, 2], 0, self.cats)
        assert 0 < value < 1

    def test_no_positives_retrieved(self):
        assert w_ndcg_at_k([5, 3], [0, 1], 0, self.cats) == 0.0

    def test_exhaustive_oracle(self):
        universe = list(range(6))
        positives = [0, 2, 4]
        target = 1
        gains = {}
        for p in positives:
            gains[p] = 2.0 if self.cats[p, target] else 1.0
        k = 3
        best = brute_force_best_dcg(universe, gains, k)
        for slate in itertools.permutations(universe, k):
            expected = brute_force_dcg(slate, gains) / best
            got = w_ndcg_at_k(list(slate), positives, target, self.cats)
            assert got == pytest.approx(expected, abs=1e-12)

    def test_degenerates_to_ndcg_when_all_positives_in_target(self):
        positives = [0, 1]
        for slate in itertools.permutations(range(6), 3):
            a = w_ndcg_at_k(list(slate), positives, 0, self.cats)
            b = ndcg_at_k(list(slate), positives)
            assert a == pytest.approx(b, abs=1e-12)


def report(cov, iso, m):
    return BubbleReport(coverage=cov, iso_index=iso, mcd=m, severity=0)


class TestSeverity:
    def test_floor(self):
        assert severity([report(10, 0.0, 0.0)]) == 1

    def test_ceiling(self):
        assert severity([report(1, 1.0, 1.0)]) == 5

    def test_mid_signals(self):
        assert severity([report(5, 0.5, 0.5)]) == 3

    def test_threshold_table(self):
        # mean signal boundaries at 0.2/0.4/0.6/0.8
        assert severity([report(10, 0.3, 0.3)]) == 1    # mean 0.2
        assert severity([report(10, 0.35, 0.35)]) == 2  # mean ~0.233
        assert severity([report(10, 0.9, 0.95)]) == 4   # mean ~0.6167

    def test_rising_mcd_bumps(self):
        history = [report(5, 0.5, 0.2), report(5, 0.5, 0.6)]
        flat = [report(5, 0.5, 0.6), report(5, 0.5, 0.6)]
        assert severity(history) == severity(flat) + 1

    def test_bump_caps_at_five(self):
        history = [report(1, 1.0, 0.5), report(1, 1.0, 1.0)]
        assert severity(history) == 5

    def test_monotone_in_each_signal(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            c, i, m = rng.uniform(0, 10), rng.uniform(0, 1), rng.uniform(0, 1)
            base = severity([report(c, i, m)])
            assert severity([report(c, min(i + 0.2, 1), m)]) >= base
            assert severity([report(c, i, min(m + 0.2, 1))]) >= base
            assert severity([report(max(c - 2, 0), i, m)]) >= base


class TestBiasAmplification:
    def test_slates_match_history_zero_delta(self):
        hist = np.asarray([[0.5, 0.5], [0.8, 0.2]])
        out = bias_amplification_report(hist, hist.copy(), ["g", "g"])
        assert out["g"]["majority_delta"] == pytest.approx(0.0)

    def test_all_majority_delta(self):
        hist = np.asarray([[0.6, 0.4]])
        recs = np.asarray([[1.0, 0.0]])
        out = bias_amplification_report(hist, recs, ["g"])
        assert out["g"]["majority_category"] == 0
        assert out["g"]["majority_delta"] == pytest.approx(0.4)

    def test_groups_partitioned(self):
        hist = np.asarray([[1.0, 0.0], [0.0, 1.0]])
        recs = np.asarray([[1.0, 0.0], [0.0, 1.0]])
        out = bias_amplification_report(hist, recs, ["a", "b"])
        assert set(out) == {"a", "b"}
        assert out["a"]["n_users"] == 1


class TestExposure:
    def test_counts(self):
        counts = exposure_counts([[0, 1], [1, 2]], 4)
        assert counts.tolist() == [1, 2, 1, 0]
