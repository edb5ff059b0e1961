import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from usat import kernels
from usat.errors import NoPositivesError
from usat.metrics import accuracy, average_precision, evaluate, macro_ap, micro_ap, per_class_ap


def rank_walk_ap(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(1 for l in labels if l)
    hits, ap = 0, 0.0
    for rank, i in enumerate(order, start=1):
        if labels[i]:
            hits += 1
            ap += (1.0 / n_pos) * (hits / rank)
    return ap


def test_hand_case():
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)


def test_perfect_ranking():
    assert average_precision([5, 4, 3, 2, 1], [1, 1, 0, 0, 0]) == 1.0


def test_ties_keep_input_order():
    assert average_precision([1, 1], [0, 1]) == 0.5
    assert average_precision([1, 1], [1, 0]) == 1.0


def test_no_positives():
    with pytest.raises(NoPositivesError):
        average_precision([0.1, 0.2], [0, 0])


def test_random_against_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 21))
        labels = rng.integers(0, 2, n)
        labels[rng.integers(n)] = 1
        scores = np.round(rng.random(n), 1)
        assert abs(average_precision(scores, labels) - rank_walk_ap(scores, labels)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=2, max_size=20), st.integers(0, 2 ** 31))
def test_monotone_invariance(scores, seed):
    labels = np.random.default_rng(seed).integers(0, 2, len(scores))
    labels[0] = 1
    s = np.array(scores) / 10.0
    assert average_precision(s, labels) == pytest.approx(average_precision(np.exp(s) * 3 + 1, labels), abs=1e-12)
    assert 0.0 <= average_precision(s, labels) <= 1.0


def test_expected_ap_of_random_scores():
    # exact E[AP] under a uniformly random ranking: a + (1 - a) * H_n / n with a = (k-1)/(n-1)
    n, k = 20, 5
    a = (k - 1) / (n - 1)
    exact = a + (1 - a) * sum(1 / i for i in range(1, n + 1)) / n
    rng = np.random.default_rng(1)
    labels = np.array([1] * k + [0] * (n - k))
    aps = [average_precision(rng.random(n), labels) for _ in range(10_000)]
    assert abs(np.mean(aps) - exact) < 0.01


def test_micro_macro():
    rng = np.random.default_rng(2)
    scores = rng.random((30, 3))
    labels = rng.integers(0, 2, (30, 3))
    assert micro_ap(scores, labels) == pytest.approx(rank_walk_ap(scores.ravel(), labels.ravel()), abs=1e-9)
    expected = np.mean([rank_walk_ap(scores[:, c], labels[:, c]) for c in range(3)])
    assert macro_ap(scores, labels) == pytest.approx(expected, abs=1e-9)


def test_single_class_macro_equals_micro():
    s = np.array([[0.3], [0.9], [0.1]])
    y = np.array([[1], [0], [1]])
    assert micro_ap(s, y) == macro_ap(s, y) == average_precision(s[:, 0], y[:, 0])


def test_macro_skips_empty_classes():
    s = np.array([[0.9, 0.2], [0.1, 0.3]])
    y = np.array([[1, 0], [0, 0]])
    assert np.isnan(per_class_ap(s, y)[1])
    assert macro_ap(s, y) == 1.0


def test_accuracy():
    s = np.eye(4)
    assert accuracy(s, np.arange(4)) == 1.0
    assert accuracy(s, np.eye(4)) == 1.0
    assert accuracy(s, [1, 1, 2, 3]) == 0.75
    assert evaluate(s, np.arange(4), "single") == {"accuracy": 1.0}


def test_ap_kernels_agree():
    rng = np.random.default_rng(3)
    for _ in range(50):
        lab = rng.integers(0, 2, 17).astype(np.float64)
        lab[0] = 1
        assert kernels.ap_sorted_jit(lab) == pytest.approx(kernels.ap_sorted_numpy(lab), abs=1e-12)
