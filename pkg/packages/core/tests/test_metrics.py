from itertools import permutations

import numpy as np
import pytest
from sklearn.metrics import average_precision_score

from lare2_core.errors import ParameterError, UndefinedMetricError
from lare2_core.metrics import ScoredSet, accuracy, average_precision


def scored(scores, labels):
    return ScoredSet(scores=tuple(scores), labels=tuple(labels), ids=tuple(f"img/{i:03d}" for i in range(len(scores))))


def brute_force_ap(scores, labels, ids):
    ranked = sorted(zip(scores, ids, labels), key=lambda item: (-item[0], item[1]))
    precisions = []
    for k, (_, _, label) in enumerate(ranked, start=1):
        if label:
            precisions.append(sum(item[2] for item in ranked[:k]) / k)
    return sum(precisions) / len(precisions)


class TestScoredSet:
    def test_length_mismatch(self):
        with pytest.raises(ParameterError):
            ScoredSet(scores=(0.1, 0.2), labels=(0,), ids=("a", "b"))

    def test_score_range(self):
        with pytest.raises(ParameterError):
            scored([1.5], [1])

    def test_labels(self):
        with pytest.raises(ParameterError):
            scored([0.5], [2])


class TestAccuracy:
    def test_hand_case(self):
        assert accuracy(scored([0.9, 0.2, 0.6, 0.4], [1, 0, 0, 1])) == 0.5

    def test_threshold_is_inclusive(self):
        assert accuracy(scored([0.5], [1])) == 1.0
        assert accuracy(scored([0.5], [0])) == 0.0

    def test_custom_threshold(self):
        assert accuracy(scored([0.3, 0.1], [1, 0]), threshold=0.25) == 1.0

    def test_empty(self):
        with pytest.raises(ParameterError):
            accuracy(scored([], []))

    def test_order_does_not_matter(self):
        rng = np.random.default_rng(3)
        scores = rng.uniform(size=12).round(2)
        labels = rng.integers(0, 2, size=12)
        expected = accuracy(scored(scores, labels))
        for _ in range(5):
            order = rng.permutation(12)
            assert accuracy(scored(scores[order], labels[order])) == expected


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision(scored([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])) == 1.0

    def test_hand_case(self):
        # Ranked labels 1, 0, 1: precisions 1 and 2/3.
        assert average_precision(scored([0.9, 0.5, 0.7], [1, 1, 0])) == pytest.approx((1 + 2 / 3) / 2)

    def test_ties_break_by_id(self):
        # Equal scores: img/000 (negative) ranks ahead of img/001 (positive).
        assert average_precision(scored([0.5, 0.5], [0, 1])) == 0.5
        assert average_precision(scored([0.5, 0.5], [1, 0])) == 1.0

    def test_no_positives(self):
        with pytest.raises(UndefinedMetricError):
            average_precision(scored([0.3, 0.7], [0, 0]))

    def test_all_positives(self):
        assert average_precision(scored([0.3, 0.7], [1, 1])) == 1.0

    def test_single_positive_ranked_last(self):
        assert average_precision(scored([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1])) == 0.25

    def test_matches_brute_force_on_short_lists(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 11))
            labels = [int(x) for x in rng.integers(0, 2, size=n)]
            labels[int(rng.integers(0, n))] = 1
            # Coarse scores so that ties are common.
            scores = [float(x) for x in rng.integers(0, 5, size=n) / 4]
            ids = [f"img/{i:03d}" for i in range(n)]
            assert average_precision(scored(scores, labels)) == brute_force_ap(scores, labels, ids)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force_and_sklearn(self, seed):
        rng = np.random.default_rng(seed)
        labels = [int(x) for x in rng.integers(0, 2, size=40)]
        labels[0] = 1
        scores = [float(x) for x in rng.random(40)]
        result = average_precision(scored(scores, labels))
        assert result == pytest.approx(brute_force_ap(scores, labels, [f"img/{i:03d}" for i in range(40)]), abs=1e-12)
        assert result == pytest.approx(average_precision_score(labels, scores), abs=1e-12)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(7)
        scores = rng.random(30)
        labels = [int(x) for x in rng.integers(0, 2, size=30)]
        labels[3] = 1
        squashed = scores**3
        assert average_precision(scored(scores.tolist(), labels)) == average_precision(scored(squashed.tolist(), labels))

    def test_invariant_under_input_order(self):
        items = [(0.9, 1, "b"), (0.4, 0, "a"), (0.6, 1, "c"), (0.6, 0, "d")]
        results = {
            average_precision(
                ScoredSet(
                    scores=tuple(item[0] for item in order),
                    labels=tuple(item[1] for item in order),
                    ids=tuple(item[2] for item in order),
                )
            )
            for order in permutations(items)
        }
        assert len(results) == 1
