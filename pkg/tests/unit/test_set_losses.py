"""
Unit tests for Hungarian / Chamfer set distances and the size / subset metrics.
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '../..'))

from lib.errors import ContractError, DimensionError
from lib.set_losses import (
    chamfer,
    chamfer_bruteforce,
    chamfer_terms,
    f1_score,
    hungarian,
    hungarian_bruteforce,
    linear_assignment,
    pairwise_cost,
    set_size_rmse,
    subset_metrics,
)

PAIRS = 500


def _random_pairs(seed):
    rng = np.random.default_rng(seed)
    for _ in range(PAIRS):
        n = int(rng.integers(2, 8))
        d = int(rng.integers(1, 4))
        yield rng.normal(size=(n, d)), rng.normal(size=(n, d))


@pytest.mark.unit
class TestHungarian:
    """Optimal bijection distance."""

    def test_matches_bruteforce(self):
        """TEST: 500 random pairs of size 2..7 agree with exhaustive search"""
        for a, b in _random_pairs(0):
            value, assignment = hungarian(a, b)
            assert value == pytest.approx(hungarian_bruteforce(a, b), rel=1e-12, abs=1e-15)
            assert sorted(assignment.columns().tolist()) == list(range(len(a)))

    def test_identical_sets_under_permutation(self):
        """TEST: a set against any permutation of itself has distance 0"""
        rng = np.random.default_rng(1)
        a = rng.normal(size=(6, 2))
        value, assignment = hungarian(a, a[rng.permutation(6)])
        assert value == 0.0
        assert assignment.total_cost == 0.0

    def test_known_matching(self):
        """TEST: crossing the obvious pairing is never chosen"""
        a = np.array([[0.0, 0.0], [1.0, 0.0]])
        b = np.array([[1.1, 0.0], [0.1, 0.0]])
        value, assignment = hungarian(a, b)
        assert assignment.pairs == ((0, 1), (1, 0))
        assert value == pytest.approx(0.01)

    def test_size_mismatch_and_empty(self):
        """TEST: unequal or empty sets are ContractErrors"""
        with pytest.raises(ContractError):
            hungarian(np.zeros((2, 2)), np.zeros((3, 2)))
        with pytest.raises(ContractError):
            hungarian(np.zeros((0, 2)), np.zeros((0, 2)))

    def test_non_square_cost_rejected(self):
        """TEST: linear_assignment only takes square matrices"""
        with pytest.raises(ContractError):
            linear_assignment(np.zeros((2, 3)))
        assert linear_assignment(np.zeros((0, 0))).pairs == ()


@pytest.mark.unit
class TestChamfer:
    """Nearest-neighbour distance."""

    def test_matches_bruteforce(self):
        """TEST: vectorized Chamfer equals the loop version"""
        for a, b in _random_pairs(2):
            assert chamfer(a, b) == pytest.approx(chamfer_bruteforce(a, b), rel=1e-12, abs=1e-15)

    def test_one_sided_term_bounded_by_hungarian(self):
        """TEST: each one-sided Chamfer term ≤ Hungarian for equal sizes"""
        for a, b in _random_pairs(3):
            forward, reverse = chamfer_terms(a, b)
            bound = hungarian(a, b)[0] + 1e-12
            assert forward <= bound
            assert reverse <= bound

    def test_unequal_sizes_allowed(self):
        """TEST: Chamfer compares sets of different sizes"""
        a = np.array([[0.0, 0.0]])
        b = np.array([[1.0, 0.0], [0.0, 2.0]])
        assert chamfer(a, b) == pytest.approx(1.0 + 2.5)

    def test_symmetric(self):
        """TEST: swapping the arguments swaps the terms"""
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(3, 2)), rng.normal(size=(5, 2))
        assert chamfer_terms(a, b) == chamfer_terms(b, a)[::-1]

    def test_errors(self):
        """TEST: empty sets and mismatched widths are rejected"""
        with pytest.raises(ContractError):
            chamfer(np.zeros((0, 2)), np.ones((1, 2)))
        with pytest.raises(DimensionError):
            pairwise_cost(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(DimensionError):
            chamfer(np.zeros(3), np.zeros((1, 3)))


@pytest.mark.unit
class TestSizeAndSubsetMetrics:
    """Cardinality RMSE and subset precision/recall."""

    def test_set_size_rmse(self):
        """TEST: RMSE of size errors, 0 for empty input"""
        assert set_size_rmse([3, 4, 5], [3, 6, 5]) == pytest.approx(np.sqrt(4 / 3))
        assert set_size_rmse([], []) == 0.0
        with pytest.raises(ContractError):
            set_size_rmse([1], [1, 2])

    def test_all_predictions_valid(self):
        """TEST: every valid subset predicted gives P = R = F1 = 1"""
        valid = [[0], [1, 2]]
        assert subset_metrics([[0], [2, 1], [0]], valid) == (1.0, 1.0, 1.0)

    def test_frequency_weighted_precision(self):
        """TEST: repeats count in precision but once in recall"""
        precision, recall, f1 = subset_metrics([[0], [0], [3], [4]], [[0], [1], [2], [1, 2]])
        assert precision == 0.5
        assert recall == 0.25
        assert f1 == pytest.approx(2 * 0.5 * 0.25 / 0.75)

    def test_empty_subset_is_a_prediction(self):
        """TEST: predicting no outliers matches an empty valid subset"""
        assert subset_metrics([[]], [[]]) == (1.0, 1.0, 1.0)

    def test_errors_and_zero_f1(self):
        """TEST: empty inputs raise and P = R = 0 gives F1 = 0"""
        with pytest.raises(ContractError):
            subset_metrics([[0]], [])
        with pytest.raises(ContractError):
            subset_metrics([], [[0]])
        assert f1_score(0.0, 0.0) == 0.0
