import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vnnet.evaluate import (Scorer, aggregate, best_threshold, classify, corrupt_negatives, evaluate_link_prediction,
                            filtered_rank, fit_thresholds, hidden_sides, rank_filtered)
from vnnet.kg import Triple

from conftest import fixture_30
from oracles import brute_filtered_rank, brute_metrics, brute_ranking, sweep_threshold


def test_metrics_example():
    rep = aggregate([1, 4, 10, 20])
    assert rep.mrr == pytest.approx((1 + 0.25 + 0.1 + 0.05) / 4)
    assert rep.mrr == pytest.approx(0.35)
    assert rep.mr == pytest.approx(8.75)
    assert rep.hits == {1: 0.25, 3: 0.25, 10: 0.75}


def test_aggregate_rejects_bad_input():
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([0.5])


def test_filtered_rank_small_cases():
    s = np.array([0.9, 0.5, 0.7, 0.5])
    assert filtered_rank(s, 1) == 3.5                       # ties with 3 at positions 3 and 4
    assert filtered_rank(s, 1, np.array([1, 0, 1, 0])) == 1.5
    assert filtered_rank(s, 0, np.array([1, 1, 1, 1])) == 1.0  # truth is never filtered


@settings(max_examples=100, deadline=None)
@given(data=st.data(), n=st.integers(1, 25))
def test_filtered_rank_matches_sort_oracle(data, n):
    scores = data.draw(st.lists(st.integers(0, 5).map(float), min_size=n, max_size=n))
    removed = data.draw(st.lists(st.booleans(), min_size=n, max_size=n))
    truth = data.draw(st.integers(0, n - 1))
    assert filtered_rank(np.array(scores), truth, np.array(removed)) == brute_filtered_rank(scores, truth, removed)


@settings(max_examples=50, deadline=None)
@given(data=st.data(), n=st.integers(2, 20))
def test_filtered_never_worse_than_raw(data, n):
    scores = np.array(data.draw(st.lists(st.floats(-5, 5), min_size=n, max_size=n)))
    removed = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    truth = data.draw(st.integers(0, n - 1))
    assert filtered_rank(scores, truth, removed) <= filtered_rank(scores, truth)


@settings(max_examples=50, deadline=None)
@given(data=st.data(), n=st.integers(1, 20))
def test_rank_invariant_to_monotone_transform(data, n):
    # a coarse grid keeps distinct scores distinct after the float transform
    scores = np.array(data.draw(st.lists(st.integers(-24, 24), min_size=n, max_size=n))) / 8
    truth = data.draw(st.integers(0, n - 1))
    assert filtered_rank(scores, truth) == filtered_rank(1 / (1 + np.exp(-scores)) * 7 + 2, truth)


def test_hidden_sides():
    assert hidden_sides(Triple(5, 0, 1), {5}) == ["tail"]
    assert hidden_sides(Triple(1, 0, 5), {5}) == ["head"]
    assert hidden_sides(Triple(1, 0, 2), {5}) == ["head", "tail"]
    assert hidden_sides(Triple(5, 0, 6), {5, 6}) == []


@pytest.mark.parametrize("seed,ablation", [(0, "full"), (1, "structure_only"), (2, "full")])
def test_evaluator_matches_brute_force(seed, ablation):
    store, model = fixture_30(seed, ablation)
    report, records, skipped = evaluate_link_prediction(model, store, store.test)
    ranks = brute_ranking(model, store, store.test)
    assert [r for *_, r in records] == ranks
    expected = brute_metrics(ranks)
    got = report.to_dict()
    for k, v in expected.items():
        assert got[k] == v
    assert skipped == 0


def test_both_unseen_triple_skipped():
    store, model = fixture_30(3)
    u1, u2 = sorted(store.unseen)[:2]
    report, records, skipped = evaluate_link_prediction(model, store, list(store.test) + [Triple(u1, 0, u2)])
    assert skipped == 1


class TableScorer:
    def __init__(self, table):
        self.table = table

    def scores(self, anchor, relation, side, candidates):
        return np.array([self.table[int(c)] for c in candidates], dtype=float)


def test_rank_filtered_removes_only_other_known():
    cands = np.arange(5)
    sc = TableScorer({0: 5.0, 1: 4.0, 2: 3.0, 3: 3.0, 4: 1.0})
    tr = Triple(9, 0, 2)
    assert rank_filtered(sc, tr, "tail", cands, set()) == 3.5
    assert rank_filtered(sc, tr, "tail", cands, {Triple(9, 0, 0), tr}) == 2.5
    with pytest.raises(ValueError):
        rank_filtered(sc, Triple(9, 0, 7), "tail", cands, set())


def test_scorer_cache_consistent():
    store, model = fixture_30(4)
    sc = Scorer(model)
    cands = np.asarray(store.observed_entities)
    a = sc.scores(0, 1, "tail", cands)
    b = sc.scores(0, 1, "tail", cands)
    assert np.array_equal(a, b)


def test_threshold_examples():
    thr, acc = best_threshold([0.1, 0.4, 0.6, 0.9], [0, 0, 1, 1])
    assert thr == pytest.approx(0.5) and acc == 1.0
    # all positive: the cut sits at the minimum
    thr, acc = best_threshold([0.3, 0.3], [1, 1])
    assert thr == 0.3 and acc == 1.0
    thr, acc = best_threshold([0.3, 0.8], [0, 0])
    assert thr > 0.8 and acc == 1.0


@settings(max_examples=60, deadline=None)
@given(data=st.data(), n=st.integers(1, 30))
def test_threshold_matches_sweep(data, n):
    scores = data.draw(st.lists(st.integers(0, 8).map(lambda x: x / 8), min_size=n, max_size=n))
    labels = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    thr, acc = best_threshold(scores, labels)
    o_thr, o_acc = sweep_threshold(scores, labels)
    assert acc == pytest.approx(o_acc) and thr == pytest.approx(o_thr)


def test_per_relation_thresholds_and_accuracy():
    scores = [0.2, 0.3, 0.7, 0.8, 0.5, 0.6]
    labels = [0, 1, 1, 1, 0, 1]
    rels = [0, 0, 0, 0, 1, 1]
    th = fit_thresholds(scores, labels, rels)
    assert th[0] == pytest.approx(0.25) and th[1] == pytest.approx(0.55)
    assert th[7] == th.global_threshold
    assert classify(scores, labels, rels, th) == 1.0


def test_corrupt_negatives_avoid_known():
    pos = [Triple(0, 0, 1), Triple(2, 1, 3)]
    known = set(pos)
    negs = corrupt_negatives(pos, range(10), known, seed=1)
    assert len(negs) == 2 and not set(negs) & known
    for p, n in zip(pos, negs):
        assert n.relation == p.relation and (n.head == p.head or n.tail == p.tail)
