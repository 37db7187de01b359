"""AUROC against an O(n^2) pairwise oracle; F1 against hand confusion matrices."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apneafusion.evalcli.metrics import UndefinedMetricError, auroc, binarize, f1


def brute_force_auroc(scores, labels):
    """Direct pairwise count: concordant + half-credit ties over pos*neg."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[np.asarray(labels) == 1]
    neg = scores[np.asarray(labels) == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_hand_worked_three_quarters(self):
        """3 concordant of 4 pos-neg pairs."""
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_all_ties_give_half(self):
        assert auroc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedMetricError):
            auroc([0.1, 0.2], [1, 1])

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(4, 30))
            scores = rng.choice([0.1, 0.25, 0.5, 0.75, 0.9], size=n)
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            assert abs(auroc(scores, labels) - brute_force_auroc(scores, labels)) < 1e-12

    @given(st.lists(st.tuples(st.sampled_from([0.0, 0.2, 0.4, 0.6, 0.8, 1.0]),
                              st.sampled_from([0, 1])), min_size=4, max_size=40))
    @settings(max_examples=150, deadline=None)
    def test_brute_force_property(self, pairs):
        scores = np.array([p[0] for p in pairs])
        labels = np.array([p[1] for p in pairs])
        if labels.min() == labels.max():
            return
        assert abs(auroc(scores, labels) - brute_force_auroc(scores, labels)) < 1e-12

    def test_invariant_under_monotone_transforms(self):
        rng = np.random.default_rng(1)
        scores = rng.random(60)
        labels = rng.integers(0, 2, 60)
        labels[0], labels[1] = 0, 1
        base = auroc(scores, labels)
        assert auroc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
        assert auroc(3.5 * scores + 11.0, labels) == pytest.approx(base, abs=1e-12)

    def test_complement_under_negation(self):
        rng = np.random.default_rng(2)
        scores = rng.standard_normal(80)  # continuous, ties have measure zero
        labels = rng.integers(0, 2, 80)
        labels[0], labels[1] = 0, 1
        assert auroc(scores, labels) + auroc(-scores, labels) == pytest.approx(1.0, abs=1e-12)


class TestF1:
    def test_perfect_predictions(self):
        assert f1([1, 0, 1, 0], [1, 0, 1, 0]) == 1.0

    def test_half_precision_full_recall(self):
        """TP=2, FP=2, FN=0: P=0.5, R=1.0 -> 2/3."""
        preds = [1, 1, 1, 1]
        labels = [1, 1, 0, 0]
        assert f1(preds, labels) == pytest.approx(2 / 3)

    def test_no_positive_predictions(self):
        assert f1([0, 0, 0], [1, 0, 1]) == 0.0

    def test_hand_confusion_matrices(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(4, 50))
            preds = rng.integers(0, 2, n)
            labels = rng.integers(0, 2, n)
            tp = np.sum((preds == 1) & (labels == 1))
            fp = np.sum((preds == 1) & (labels == 0))
            fn = np.sum((preds == 0) & (labels == 1))
            want = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
            assert f1(preds, labels) == pytest.approx(want, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            f1([], [])


def test_binarize_threshold():
    np.testing.assert_array_equal(binarize([0.2, 0.5, 0.7], 0.5), [0, 1, 1])
    np.testing.assert_array_equal(binarize([0.2, 0.5, 0.7], 0.6), [0, 0, 1])
