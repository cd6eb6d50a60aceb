import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from exitdistill import data as dd
from exitdistill.evaluation import (DataError, ReferenceCache, evaluate_scores, f1_against_reference,
                                    f1_multi_reference, importance_from_probs, knapsack_select,
                                    select_summary)
from exitdistill.numerics import ParameterError


def brute_knapsack(values, weights, cap):
    """Best value, then lexicographically earliest membership among optima."""
    n = len(values)
    best, best_set = -1.0, None
    for mask in itertools.product((1, 0), repeat=n):
        w = sum(wi for wi, m in zip(weights, mask) if m)
        if w > cap:
            continue
        v = sum(vi for vi, m in zip(values, mask) if m)
        if v > best + 1e-12:
            best, best_set = v, mask
    return best, [i for i, m in enumerate(best_set) if m]


def test_uniform_durations_pick_top_k():
    scores = np.array([0.1, 0.9, 0.3, 0.8, 0.5, 0.2, 0.7, 0.4, 0.6, 0.05, 0.15, 0.35, 0.45, 0.55, 0.65,
                       0.75, 0.85, 0.95, 0.25, 0.0])
    sel = select_summary(scores, np.ones(20, dtype=int), 0.15)
    assert sorted(sel.selected) == sorted(np.argsort(-scores)[:3].tolist())
    assert sel.selected_duration == 3 and sel.total_duration == 20


def test_full_budget_selects_everything():
    sel = select_summary([0.2, 0.0, 0.5], [2, 1, 3], 1.0)
    assert sel.selected == (0, 1, 2)


def test_tie_break_toward_lower_index():
    assert select_summary([1.0, 1.0, 1.0, 1.0], [1, 1, 1, 1], 0.5).selected == (0, 1)


def test_knapsack_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(1, 11))
        values = rng.integers(0, 6, n).astype(float)  # ties are common on purpose
        weights = rng.integers(1, 5, n)
        cap = int(rng.integers(0, weights.sum() + 1))
        best, chosen = brute_knapsack(values, weights, cap)
        got = knapsack_select(values, weights, cap)
        assert sum(values[got]) == best
        assert weights[got].sum() <= cap
        assert got == chosen


def test_select_summary_errors():
    with pytest.raises(DataError):
        select_summary([1.0, 2.0], [1, 0])
    with pytest.raises(ParameterError):
        select_summary([1.0], [1], 0.0)
    with pytest.raises(ParameterError):
        select_summary([1.0], [1], 1.5)


def test_f1_examples():
    d = np.ones(8, dtype=int)
    same = f1_against_reference([1, 2], [1, 2], d)
    assert (same.precision, same.recall, same.f1) == (1.0, 1.0, 1.0)
    assert f1_against_reference([0, 1], [2, 3], d).f1 == 0.0
    r = f1_against_reference([0, 1, 2, 3], [2, 3, 4], d)
    assert r.precision == 0.5 and r.recall == pytest.approx(2 / 3) and r.f1 == pytest.approx(4 / 7)


def test_f1_uses_frame_units():
    r = f1_against_reference([0], [0, 1], [3, 1])
    assert r.precision == 1.0 and r.recall == 0.75


def test_f1_empty_conventions_and_range():
    d = np.ones(4, dtype=int)
    e = f1_against_reference([], [1], d)
    assert (e.precision, e.recall, e.f1) == (0.0, 0.0, 0.0)
    assert f1_against_reference([1], [], d).recall == 0.0
    with pytest.raises(DataError):
        f1_against_reference([4], [1], d)


sets = st.sets(st.integers(0, 11), max_size=12)


@given(sets, sets, st.lists(st.integers(1, 4), min_size=12, max_size=12))
def test_f1_identity_and_symmetry(s, g, dur):
    a = f1_against_reference(s, g, dur)
    b = f1_against_reference(g, s, dur)
    assert a.precision == b.recall and a.recall == b.precision
    assert abs(a.f1 * (a.precision + a.recall) - 2 * a.precision * a.recall) <= 1e-12
    if a.precision + a.recall == 0:
        assert a.f1 == 0.0


def test_multi_reference_aggregation():
    d = np.ones(6, dtype=int)
    single = f1_multi_reference([0, 1], [[1, 2]], d)
    assert single.f1 == f1_against_reference([0, 1], [1, 2], d).f1
    same = [[1, 2], [1, 2]]
    assert f1_multi_reference([0, 1], same, d, "mean").f1 == f1_multi_reference([0, 1], same, d, "max").f1
    refs = [[0, 1], [2, 3], [0, 5]]
    per = [f1_against_reference([0, 1], r, d).f1 for r in refs]
    mean = f1_multi_reference([0, 1], refs, d, "mean")
    mx = f1_multi_reference([0, 1], refs, d, "max")
    assert min(per) <= mean.f1 <= mx.f1 == max(per)
    assert len(mean.per_reference) == 3
    with pytest.raises(ParameterError):
        f1_multi_reference([0], [], d)
    with pytest.raises(ParameterError):
        f1_multi_reference([0], [[0]], d, "median")


def test_importance_from_probs():
    p = np.array([[0.0, 0.0, 0.0, 0.0, 1.0], [0.2] * 5])
    assert importance_from_probs(p).tolist() == [5.0, 3.0]
    assert importance_from_probs(np.array([[0.3, 0.7]])).tolist() == [0.7]


def test_gold_mean_scores_beat_shuffled():
    ds = dd.generate(dd.PlantedSpec(), dd.DatasetHeader(annotators=5), 10, 30)
    refs = ReferenceCache(ds)
    good = evaluate_scores(ds, ds.gold_scores.mean(axis=1), references=refs).f1
    bad = evaluate_scores(ds, np.random.default_rng(0).permutation(ds.gold_scores.mean(axis=1)),
                          references=refs).f1
    assert good > bad
    with pytest.raises(DataError):
        evaluate_scores(ds, np.zeros(3))
