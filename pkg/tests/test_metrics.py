import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score

from drfuse.errors import InvalidInputError, UndefinedMetricError
from drfuse.metrics import bootstrap_ci, macro_prauc, prauc


def brute_force_ap(scores, labels):
    """Walk the ranking one position at a time, building the curve explicitly."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))  # stable on ties
    n_pos = sum(1 for y in labels if y == 1)
    curve = []  # (recall, precision) after each rank
    hits = 0
    for k, i in enumerate(order, 1):
        hits += labels[i] == 1
        curve.append((hits, hits / k))
    steps, prev = [], 0
    for hits_k, precision in curve:
        if hits_k > prev:  # recall increased by 1 / n_pos at this rank
            steps.append(precision)
        prev = hits_k
    return math.fsum(steps) / n_pos


def exact_ap(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(labels)
    total, hits = Fraction(0), 0
    for k, i in enumerate(order, 1):
        if labels[i]:
            hits += 1
            total += Fraction(hits, k)
    return total / n_pos


def test_worked_example():
    assert prauc([0.9, 0.8, 0.3], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)
    assert prauc([0.9, 0.8, 0.3], [1, 0, 1]) == brute_force_ap([0.9, 0.8, 0.3], [1, 0, 1])


def test_all_positive_is_one():
    rng = np.random.default_rng(0)
    assert prauc(rng.random(20), np.ones(20)) == 1.0


def test_matches_brute_force_exactly():
    rng = np.random.default_rng(0)
    done = 0
    while done < 500:
        n = int(rng.integers(1, 51))
        labels = rng.integers(0, 2, n)
        if labels.sum() == 0:
            continue
        # coarse grid forces ties in many instances
        scores = rng.integers(0, 6, n) / 5 if done % 2 else rng.random(n)
        got = prauc(scores, labels)
        assert got == brute_force_ap(scores.tolist(), labels.tolist())
        assert abs(got - float(exact_ap(scores.tolist(), labels.tolist()))) < 1e-15
        done += 1


def test_agrees_with_sklearn_without_ties():
    rng = np.random.default_rng(1)
    for _ in range(50):
        labels = rng.integers(0, 2, 40)
        labels[0] = 1
        scores = rng.random(40)
        assert prauc(scores, labels) == pytest.approx(average_precision_score(labels, scores), abs=1e-12)


def test_ties_keep_input_order():
    assert prauc([0.5, 0.5], [1, 0]) == 1.0
    assert prauc([0.5, 0.5], [0, 1]) == 0.5


def test_constant_scores_give_prevalence():
    rng = np.random.default_rng(0)
    n, p = 10000, 0.2
    labels = (rng.random(n) < p).astype(int)
    rng.shuffle(labels)
    assert prauc(np.full(n, 0.3), labels) == pytest.approx(labels.mean(), abs=0.01)


def test_no_positives_undefined():
    with pytest.raises(UndefinedMetricError):
        prauc([0.1, 0.2], [0, 0])


def test_length_mismatch():
    with pytest.raises(InvalidInputError):
        prauc([0.1, 0.2], [0, 1, 1])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0, 1), min_size=n, max_size=n), st.lists(st.integers(0, 1), min_size=n, max_size=n))))
def test_prauc_in_unit_interval(sl):
    scores, labels = sl
    if sum(labels) == 0:
        return
    v = prauc(scores, labels)
    assert 0 < v <= 1


# -- macro ----------------------------------------------------------------------------


def test_macro_is_unweighted_mean_and_skips(caplog):
    rng = np.random.default_rng(2)
    scores = rng.random((30, 4))
    labels = rng.integers(0, 2, (30, 4))
    labels[:, 2] = 0
    result = macro_prauc(scores, labels)
    per = [prauc(scores[:, c], labels[:, c]) for c in (0, 1, 3)]
    assert result.macro == pytest.approx(np.mean(per), abs=1e-15)
    assert result.n_skipped == 1 and math.isnan(result.per_class[2])
    assert "excluded" in caplog.text


def test_macro_all_skipped_is_nan():
    assert math.isnan(macro_prauc(np.zeros((3, 2)), np.zeros((3, 2)), warn=False).macro)


# -- bootstrap -------------------------------------------------------------------------


def synthetic_scores(n, C=3, seed=0, signal=1.0):
    rng = np.random.default_rng(seed)
    labels = (rng.random((n, C)) < 0.3).astype(int)
    scores = 1 / (1 + np.exp(-(signal * (2 * labels - 1) + rng.standard_normal((n, C)))))
    return scores, labels


def test_bootstrap_reproducible():
    s, y = synthetic_scores(200)
    assert bootstrap_ci(s, y, n_iter=200, seed=5) == bootstrap_ci(s, y, n_iter=200, seed=5)
    assert bootstrap_ci(s, y, n_iter=200, seed=5) != bootstrap_ci(s, y, n_iter=200, seed=6)


def test_bootstrap_constant_metric():
    y = np.array([[1], [0], [1], [0]])
    s = y.astype(float)  # perfect ranking in every resample with a positive
    lo, hi = bootstrap_ci(s, y, n_iter=100)
    assert lo == hi == 1.0


def test_bootstrap_contains_point_and_orders():
    s, y = synthetic_scores(300, seed=1)
    point = macro_prauc(s, y).macro
    lo, hi = bootstrap_ci(s, y, n_iter=300)
    assert lo <= point <= hi


def test_bootstrap_width_shrinks():
    s_small, y_small = synthetic_scores(200, seed=0)
    s_big, y_big = synthetic_scores(2000, seed=0)
    w_small = np.subtract(*bootstrap_ci(s_small, y_small, n_iter=300)[::-1])
    w_big = np.subtract(*bootstrap_ci(s_big, y_big, n_iter=300)[::-1])
    assert w_big < w_small


def test_bootstrap_empty():
    with pytest.raises(InvalidInputError):
        bootstrap_ci(np.zeros((0, 2)), np.zeros((0, 2)))
