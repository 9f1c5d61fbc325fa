"""Metric correctness against brute-force and second-implementation oracles."""

import math

import numpy as np
import pytest

from decaph.metrics import (
    auroc,
    binary_metrics,
    confusion_counts,
    multiclass_metrics,
    roc_curve,
    tpr_at_fpr,
    youden_threshold,
)
from decaph.numerics import Prng


# ---------------------------------------------------------------------------
# Oracles (independent implementations kept deliberately naive)
# ---------------------------------------------------------------------------


def auroc_pairwise(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = ties = 0
    for a in pos:
        for b in neg:
            if a > b:
                wins += 1
            elif a == b:
                ties += 1
    return (2 * wins + ties) / (2 * len(pos) * len(neg))


def youden_sweep(scores, labels):
    candidates = sorted(set(float(s) for s in scores)) + [float(max(scores)) + 1.0]
    best_j, best_t = -math.inf, None
    for t in candidates:
        preds = scores >= t
        tpr = np.sum(preds & (labels == 1)) / np.sum(labels == 1)
        fpr = np.sum(preds & (labels == 0)) / np.sum(labels == 0)
        j = tpr - fpr
        if j > best_j or (j == best_j and t < best_t):
            best_j, best_t = j, t
    return best_t, best_j


def binary_formulas(scores, labels, threshold):
    preds = (scores >= threshold).astype(int)
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    ppv = tp / (tp + fp) if tp + fp else math.nan
    npv = tn / (tn + fn) if tn + fn else math.nan
    f1_pos = 2 * tp / (2 * tp + fn + fp) if 2 * tp + fn + fp else math.nan
    f1_neg = 2 * tn / (2 * tn + fp + fn) if 2 * tn + fp + fn else math.nan
    n_pos, n_neg = tp + fn, tn + fp
    weighted = (n_neg * f1_neg + n_pos * f1_pos) / (n_neg + n_pos)
    return ppv, npv, f1_neg, f1_pos, (f1_neg + f1_pos) / 2, weighted


# ---------------------------------------------------------------------------
# AUROC
# ---------------------------------------------------------------------------


class TestAuroc:
    def test_perfect_and_inverted(self):
        labels = np.array([0, 0, 1, 1])
        assert auroc(np.array([0.1, 0.2, 0.8, 0.9]), labels) == 1.0
        assert auroc(np.array([0.9, 0.8, 0.2, 0.1]), labels) == 0.0

    def test_matches_pairwise_oracle_exactly(self):
        gen = Prng(21).generator()
        for n in (10, 137, 500):
            scores = np.round(gen.random(n), 2)  # coarse grid forces ties
            labels = (gen.random(n) < 0.4).astype(np.int64)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            assert auroc(scores, labels) == auroc_pairwise(scores, labels)

    def test_all_tied_scores_give_half(self):
        scores = np.ones(20)
        labels = np.array([0, 1] * 10)
        assert auroc(scores, labels) == 0.5

    def test_no_signal_near_half(self):
        gen = Prng(22).generator()
        scores = gen.random(10_000)
        labels = (gen.random(10_000) < 0.5).astype(np.int64)
        assert abs(auroc(scores, labels) - 0.5) < 0.02

    def test_invariant_under_monotone_transform(self):
        gen = Prng(23).generator()
        scores = gen.standard_normal(300)
        labels = (gen.random(300) < 0.5).astype(np.int64)
        base = auroc(scores, labels)
        assert auroc(np.exp(scores), labels) == base
        assert auroc(3 * scores - 7, labels) == base

    def test_permutation_invariance(self):
        gen = Prng(24).generator()
        scores = gen.random(200)
        labels = (gen.random(200) < 0.3).astype(np.int64)
        perm = gen.permutation(200)
        assert auroc(scores, labels) == auroc(scores[perm], labels[perm])

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            auroc(np.array([0.1, 0.9]), np.array([1, 1]))


class TestRocCurve:
    def test_endpoints(self):
        fpr, tpr, thr = roc_curve(np.array([0.1, 0.9, 0.4]), np.array([0, 1, 1]))
        assert fpr[0] == 0.0 and tpr[0] == 0.0
        assert fpr[-1] == 1.0 and tpr[-1] == 1.0
        assert thr[0] == np.inf

    def test_tpr_at_fpr_step_semantics(self):
        scores = np.array([0.9, 0.8, 0.7, 0.6, 0.3, 0.2])
        labels = np.array([1, 1, 0, 1, 0, 0])
        # at threshold 0.6: tpr=1, fpr=1/3; at 0.8: tpr=2/3, fpr=0
        out = tpr_at_fpr(scores, labels, [0.0, 0.4, 1.0])
        assert out == [pytest.approx(2 / 3), pytest.approx(1.0), pytest.approx(1.0)]


# ---------------------------------------------------------------------------
# Youden threshold
# ---------------------------------------------------------------------------


class TestYouden:
    def test_matches_exhaustive_sweep(self):
        gen = Prng(31).generator()
        for n in (8, 57, 301):
            scores = np.round(gen.random(n), 2)
            labels = (gen.random(n) < 0.5).astype(np.int64)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            t = youden_threshold(scores, labels)
            t_oracle, j_oracle = youden_sweep(scores, labels)
            assert t == t_oracle

    def test_returned_threshold_is_optimal(self):
        gen = Prng(32).generator()
        scores = gen.random(400)
        labels = (gen.random(400) < 0.4).astype(np.int64)
        t = youden_threshold(scores, labels)

        def j_at(thr):
            preds = scores >= thr
            return np.mean(preds[labels == 1]) - np.mean(preds[labels == 0])

        best = j_at(t)
        for cand in scores:
            assert best >= j_at(cand) - 1e-12

    def test_separated_tie_rule_picks_smallest_candidate(self):
        scores = np.array([0.1, 0.2, 0.8, 0.9])
        labels = np.array([0, 0, 1, 1])
        # J = 1 at thresholds 0.8 (and nothing smaller); smallest maximizer
        assert youden_threshold(scores, labels) == 0.8

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            youden_threshold(np.array([0.5, 0.6]), np.array([0, 0]))


# ---------------------------------------------------------------------------
# Binary metrics
# ---------------------------------------------------------------------------


class TestBinaryMetrics:
    def test_ppv_formula(self):
        # tp=3, fp=1 at threshold 0.5
        scores = np.array([0.9, 0.8, 0.7, 0.6, 0.1])
        labels = np.array([1, 1, 1, 0, 0])
        m = binary_metrics(scores, labels, 0.5)
        assert m.ppv == 0.75

    def test_perfect_predictions(self):
        scores = np.array([0.9, 0.9, 0.1, 0.1])
        labels = np.array([1, 1, 0, 0])
        m = binary_metrics(scores, labels, 0.5)
        assert m.ppv == m.npv == m.macro_f1 == m.weighted_f1 == 1.0
        assert m.f1_per_class == (1.0, 1.0)

    def test_matches_independent_formulas_on_random_instances(self):
        gen = Prng(41).generator()
        scores = gen.random(10_000)
        labels = (gen.random(10_000) < 0.37).astype(np.int64)
        m = binary_metrics(scores, labels, 0.5)
        ppv, npv, f1n, f1p, macro, weighted = binary_formulas(scores, labels, 0.5)
        assert m.ppv == ppv
        assert m.npv == npv
        assert m.f1_per_class == (f1n, f1p)
        assert m.macro_f1 == macro
        assert m.weighted_f1 == weighted

    def test_undefined_cells_are_nan_not_zero(self):
        # nothing predicted positive -> PPV undefined
        scores = np.array([0.1, 0.2, 0.3])
        labels = np.array([0, 1, 0])
        m = binary_metrics(scores, labels, 0.9)
        assert math.isnan(m.ppv)
        assert not math.isnan(m.npv)

    def test_weighted_f1_between_min_and_max(self):
        gen = Prng(42).generator()
        for _ in range(20):
            scores = gen.random(60)
            labels = (gen.random(60) < 0.3).astype(np.int64)
            if labels.sum() in (0, 60):
                continue
            m = binary_metrics(scores, labels, 0.5)
            f1s = [f for f in m.f1_per_class if not math.isnan(f)]
            assert min(f1s) - 1e-12 <= m.weighted_f1 <= max(f1s) + 1e-12

    def test_non_finite_threshold_rejected(self):
        with pytest.raises(ValueError):
            binary_metrics(np.array([0.5]), np.array([1]), math.inf)


# ---------------------------------------------------------------------------
# Multiclass metrics
# ---------------------------------------------------------------------------


def multiclass_oracle(preds, labels, k):
    f1s, precs, recs, ns = [], [], [], []
    for c in range(k):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        n_c = tp + fn
        f1s.append(2 * tp / (2 * tp + fn + fp) if 2 * tp + fn + fp else math.nan)
        precs.append(tp / (tp + fp) if tp + fp else 0.0)
        recs.append(tp / (tp + fn) if tp + fn else math.nan)
        ns.append(n_c)
    total = sum(ns)
    defined = [f for f, n in zip(f1s, ns) if n > 0]
    return (
        float(np.median(defined)),
        sum(p * n for p, n in zip(precs, ns)) / total,
        sum(r * n for r, n in zip(recs, ns) if n > 0) / total,
    )


class TestMulticlassMetrics:
    def test_perfect_four_class(self):
        labels = np.array([0, 1, 2, 3] * 5)
        m = multiclass_metrics(labels, labels, 4)
        assert (m.median_f1, m.weighted_precision, m.weighted_recall) == (1.0, 1.0, 1.0)

    def test_constant_predictor_on_balanced_binary(self):
        labels = np.array([0, 1] * 10)
        preds = np.zeros(20, dtype=int)
        with pytest.warns(UserWarning):
            m = multiclass_metrics(preds, labels, 2)
        assert m.weighted_recall == 0.5

    def test_matches_independent_oracle(self):
        gen = Prng(51).generator()
        labels = gen.integers(0, 4, 1000)
        preds = gen.integers(0, 4, 1000)
        m = multiclass_metrics(preds, labels, 4)
        med, wp, wr = multiclass_oracle(preds, labels, 4)
        assert m.median_f1 == med
        assert m.weighted_precision == wp
        assert m.weighted_recall == wr

    def test_absent_class_excluded_from_median_with_warning(self):
        labels = np.array([0, 0, 1, 1])
        preds = np.array([0, 0, 1, 1])
        with pytest.warns(UserWarning):
            m = multiclass_metrics(preds, labels, 3)
        assert m.median_f1 == 1.0
        assert math.isnan(m.f1_per_class[2])

    def test_even_median_averages_middle_two(self):
        labels = np.array([0] * 10 + [1] * 10 + [2] * 10 + [3] * 10)
        preds = labels.copy()
        preds[:5] = 1  # degrade class 0 and inflate class 1 errors
        m = multiclass_metrics(preds, labels, 4)
        f1s = sorted(m.f1_per_class)
        assert m.median_f1 == pytest.approx((f1s[1] + f1s[2]) / 2)

    def test_confusion_counts_consistent(self):
        preds = np.array([0, 1, 1, 0])
        labels = np.array([0, 1, 0, 1])
        c = confusion_counts(preds, labels, 1)
        assert (c.tp, c.fp, c.tn, c.fn) == (1, 1, 1, 1)
        assert c.tp + c.fp + c.tn + c.fn == 4

    def test_permutation_invariance(self):
        gen = Prng(52).generator()
        labels = gen.integers(0, 3, 200)
        preds = gen.integers(0, 3, 200)
        perm = gen.permutation(200)
        a = multiclass_metrics(preds, labels, 3)
        b = multiclass_metrics(preds[perm], labels[perm], 3)
        assert a == b
