import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vnnet.kg import Triple
from vnnet.rules import GroundRule
from vnnet.softlabel import (conditional_truth, implication_truth, solve_soft_labels, t_and, t_not, t_or,
                             tnorm)

from oracles import qp_objective, qp_soft_label

unit = st.floats(0.0, 1.0)


@given(unit)
def test_identities(t):
    assert tnorm("and", 1.0, t) == t
    assert tnorm("or", 0.0, t) == t
    assert tnorm("not", tnorm("not", t)) == pytest.approx(t, abs=1e-15)


@given(unit, unit)
def test_range_preserved(a, b):
    for v in (t_and(a, b), t_or(a, b), t_not(a), implication_truth(a, b)):
        assert -1e-15 <= v <= 1 + 1e-15


def test_implication_examples():
    assert implication_truth(0.0, 0.3) == 1.0
    assert implication_truth(1.0, 0.3) == pytest.approx(0.3)
    assert implication_truth(0.7, 0.4) == pytest.approx(0.58)


def test_bad_connective():
    with pytest.raises(ValueError):
        tnorm("xor", 0.1, 0.2)
    with pytest.raises(ValueError):
        tnorm("and", 0.1)


def test_conditional_truth_examples():
    assert conditional_truth([1.0]) == (1.0, 0.0)
    assert conditional_truth([1.0, 1.0, 1.0])[0] == 1.0
    slope, icpt = conditional_truth([0.9, 0.8])
    assert slope == pytest.approx(0.72) and icpt == pytest.approx(0.28)


def vn_case(I, lam, truths, premises=None):
    x = Triple(9, 0, 1)
    premises = premises or [Triple(i, 1, 2) for i in range(len(truths))]
    g = GroundRule(tuple(premises), x, lam, "logic")
    scores = {x: I, **dict(zip(premises, truths))}
    return x, {x: [g]}, scores


def test_solver_examples():
    x, gs, sc = vn_case(0.5, 0.9, [1.0])
    assert solve_soft_labels([x], gs, sc, 0.01)[x] == pytest.approx(0.509)
    x, gs, sc = vn_case(0.999, 1.0, [1.0])
    assert solve_soft_labels([x], gs, sc, 0.01)[x] == 1.0


def test_missing_score_names_triple():
    x, gs, sc = vn_case(0.5, 0.9, [1.0])
    del sc[Triple(0, 1, 2)]
    with pytest.raises(KeyError, match=r"\(0, 1, 2\)"):
        solve_soft_labels([x], gs, sc)


def test_no_groundings_is_clipped_score():
    x = Triple(1, 0, 2)
    assert solve_soft_labels([x], {}, {x: 0.3}) == {x: 0.3}


@settings(max_examples=50, deadline=None)
@given(I=unit, lam=st.floats(0.8, 1.0), truths=st.lists(unit, min_size=1, max_size=3),
       C=st.sampled_from([0.0, 0.01, 0.1, 1.0]))
def test_closed_form_is_qp_optimum(I, lam, truths, C):
    x, gs, sc = vn_case(I, lam, truths)
    s = solve_soft_labels([x], gs, sc, C)[x]
    assert s == pytest.approx(qp_soft_label(I, [(lam, truths)], C), abs=1e-8)
    # no point on a fine grid does better
    grid = np.linspace(0, 1, 201)
    best = min(qp_objective(v, I, [(lam, truths)], C) for v in grid)
    assert qp_objective(s, I, [(lam, truths)], C) <= best + 1e-12


def test_zero_penalty_returns_score():
    x, gs, sc = vn_case(0.42, 0.9, [0.7, 0.8])
    assert solve_soft_labels([x], gs, sc, 0.0)[x] == 0.42


@settings(max_examples=50, deadline=None)
@given(I=unit, lam=st.floats(0.0, 1.0), t=unit, d=st.floats(0.0, 0.2), C=st.floats(0.0, 1.0))
def test_monotone_in_inputs(I, lam, t, d, C):
    def s(I_, lam_, t_):
        x, gs, sc = vn_case(I_, lam_, [t_])
        return solve_soft_labels([x], gs, sc, C)[x]

    base = s(I, lam, t)
    assert s(min(1.0, I + d), lam, t) >= base
    assert s(I, min(1.0, lam + d), t) >= base
    assert s(I, lam, min(1.0, t + d)) >= base
    assert 0.0 <= base <= 1.0


def test_several_groundings_sum():
    x = Triple(9, 0, 1)
    p1, p2 = Triple(0, 1, 2), Triple(1, 1, 2)
    gs = {x: [GroundRule((p1,), x, 0.9, "logic"), GroundRule((p2,), x, 0.8, "sp")]}
    s = solve_soft_labels([x], gs, {x: 0.2, p1: 0.5, p2: 1.0}, 0.1)[x]
    assert s == pytest.approx(0.2 + 0.1 * (0.9 * 0.5 + 0.8 * 1.0))
