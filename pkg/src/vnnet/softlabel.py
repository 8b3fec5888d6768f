"""Product t-norm truth calculus and closed-form soft labels for virtual triples.

All functions accept floats or numpy arrays.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .kg import Triple
from .rules import GroundRule

DEFAULT_PENALTY = 0.01


def t_and(a, b):
    return a * b


def t_or(a, b):
    return a + b - a * b


def t_not(a):
    return 1.0 - a


def tnorm(op: str, a, b=None):
    if op == "not":
        return t_not(a)
    if b is None:
        raise ValueError(f"{op!r} needs two operands")
    if op == "and":
        return t_and(a, b)
    if op == "or":
        return t_or(a, b)
    raise ValueError(f"unknown connective {op!r}")


def implication_truth(premise, conclusion):
    """Truth of ``premise => conclusion`` read as ``not premise or conclusion``."""
    return premise * conclusion - premise + 1.0


def conditional_truth(premise_truths: Sequence[float]) -> tuple[float, float]:
    """Truth of a grounding as an affine function of its conclusion's soft label.

    Returns ``(slope, intercept)`` with ``slope`` the t-norm conjunction of the
    premise truths, so that the truth equals ``slope * s + intercept``.
    """
    p = 1.0
    for t in premise_truths:
        p = t_and(p, t)
    return p, 1.0 - p


def solve_soft_labels(vn_triples: Sequence[Triple], groundings: Mapping[Triple, Sequence[GroundRule]],
                      scores: Mapping[Triple, float], penalty=DEFAULT_PENALTY) -> dict[Triple, float]:
    """Closed-form optimum ``clip(I(x) + C * sum_f lambda_f * slope_f, 0, 1)`` per virtual triple.

    ``scores`` must hold a truth value for each virtual triple and for every
    premise triple of its groundings.
    """
    out = {}
    for tr in vn_triples:
        push = 0.0
        for g in groundings.get(tr, ()):
            slope, _ = conditional_truth([_score(scores, p) for p in g.premises])
            push += g.confidence * slope
        out[tr] = float(np.clip(_score(scores, tr) + penalty * push, 0.0, 1.0))
    return out


def _score(scores, tr):
    try:
        return scores[tr]
    except KeyError:
        raise KeyError(f"no score for triple {tuple(tr)}") from None
