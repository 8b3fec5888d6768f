"""Filtered link-prediction ranking and per-relation triple classification."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .kg import Triple, TripleStore
from .model import VNModel, decode_scores

HITS_AT = (1, 3, 10)


# -------------------------------------------------------------- ranking

@dataclass
class RankingReport:
    mr: float
    mrr: float
    hits: dict
    ranks: list = field(default_factory=list, repr=False)

    def to_dict(self, with_ranks=False):
        d = {"MR": self.mr, "MRR": self.mrr, "count": len(self.ranks)}
        d.update({f"Hits@{k}": v for k, v in self.hits.items()})
        if with_ranks:
            d["ranks"] = list(self.ranks)
        return d


def aggregate(ranks: Sequence[float], hits_at=HITS_AT) -> RankingReport:
    if len(ranks) == 0:
        raise ValueError("cannot aggregate an empty rank list")
    r = np.asarray(ranks, dtype=np.float64)
    if (r < 1).any():
        raise ValueError("ranks must be >= 1")
    n = len(r)
    # fsum is correctly rounded, so the metrics do not depend on rank order
    return RankingReport(math.fsum(r) / n, math.fsum(1.0 / r) / n,
                         {k: float((r <= k).sum()) / n for k in hits_at}, [float(x) for x in r])


def filtered_rank(scores: np.ndarray, truth: int, removed: np.ndarray | None = None) -> float:
    """Rank of ``scores[truth]`` among candidates not ``removed``; ties get the mean rank."""
    scores = np.asarray(scores)
    keep = np.ones(len(scores), bool) if removed is None else ~np.asarray(removed, bool)
    keep[truth] = True
    s = scores[truth]
    surv = scores[keep]
    higher = int((surv > s).sum())
    ties = int((surv == s).sum()) - 1
    return 1.0 + higher + ties / 2.0


class Scorer:
    """Inference-time scorer over a frozen model; caches candidate embeddings per query."""

    def __init__(self, model: VNModel):
        self.model = model
        self.hl = model.structure_forward(train=False)
        self._cache = {}

    def _embed(self, ents, queries):
        return self.model.embed_pairs(self.hl, ents, queries).data

    def scores(self, anchor: int, relation: int, side: str, candidates: np.ndarray) -> np.ndarray:
        """Raw scores of completing ``anchor``'s triple with each candidate in the hidden slot."""
        m = self.model
        nb = m.relations.num_base
        # the head is embedded under r, the tail under inv(r)
        if side == "tail":
            anchor_q, cand_q = relation, relation + nb
        else:
            anchor_q, cand_q = relation + nb, relation
        key = (relation, side, np.asarray(candidates).tobytes())
        if key not in self._cache:
            self._cache[key] = self._embed(candidates, np.full(len(candidates), cand_q))
        ec = self._cache[key]
        ea = np.broadcast_to(self._embed([anchor], [anchor_q]), ec.shape)
        rel = np.broadcast_to(m.params["R"].data[relation], ec.shape)
        if side == "tail":
            return decode_scores(m.config.decoder, Tensor(ea), Tensor(rel), Tensor(ec)).data
        return decode_scores(m.config.decoder, Tensor(ec), Tensor(rel), Tensor(ea)).data


def rank_filtered(scorer, triple: Triple, side: str, candidates: np.ndarray, known: set) -> float:
    """Filtered rank of the hidden ``side`` ("head" or "tail") of ``triple``.

    ``scorer`` is anything with the :meth:`Scorer.scores` signature.
    Candidates forming a known triple other than the ground truth are removed.
    """
    h, r, t = triple
    truth = t if side == "tail" else h
    anchor = h if side == "tail" else t
    pos = np.flatnonzero(candidates == truth)
    if len(pos) == 0:
        raise ValueError(f"ground truth entity {truth} is not a candidate")
    scores = scorer.scores(anchor, r, side, candidates)
    if side == "tail":
        removed = np.fromiter(((h, r, int(c)) in known for c in candidates), bool, len(candidates))
    else:
        removed = np.fromiter(((int(c), r, t) in known for c in candidates), bool, len(candidates))
    return filtered_rank(scores, int(pos[0]), removed)


def hidden_sides(triple: Triple, unseen) -> list[str]:
    """Slots to hide: the observed side of a test triple, both sides if fully observed."""
    h_u, t_u = triple.head in unseen, triple.tail in unseen
    if h_u and t_u:
        return []
    if h_u:
        return ["tail"]
    if t_u:
        return ["head"]
    return ["head", "tail"]


def known_triples(store: TripleStore, filter_sets=("observed", "auxiliary", "validation", "test")) -> set:
    out = set()
    for name in filter_sets:
        out |= store.partition(name)
    return out


def evaluate_link_prediction(model: VNModel, store: TripleStore, triples, filter_sets=None,
                             candidates=None, scorer=None):
    """Rank every triple in ``triples``; returns the report and per-query records.

    Triples with both endpoints unseen have no candidate-eligible slot and
    are counted as skipped.
    """
    filter_sets = filter_sets or ("observed", "auxiliary", "validation", "test")
    known = known_triples(store, filter_sets)
    if candidates is None:
        candidates = np.asarray(store.observed_entities, dtype=np.int64)
    scorer = scorer or Scorer(model)
    records, skipped = [], 0
    for tr in sorted(triples):
        sides = hidden_sides(tr, store.unseen)
        if not sides:
            skipped += 1
            continue
        for side in sides:
            records.append((tr, side, rank_filtered(scorer, tr, side, candidates, known)))
    report = aggregate([r for _, _, r in records])
    return report, records, skipped


# --------------------------------------------------------- classification

@dataclass
class RelationThresholds:
    per_relation: dict
    global_threshold: float

    def __getitem__(self, r) -> float:
        return self.per_relation.get(r, self.global_threshold)


def best_threshold(scores, labels) -> tuple[float, float]:
    """Accuracy-maximizing threshold for ``score >= δ`` ⇒ positive.

    Candidates are the lowest score (everything positive), midpoints between
    consecutive distinct scores, and just above the highest score
    (everything negative). Ties go to the larger threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.size == 0:
        raise ValueError("no scores to fit a threshold on")
    v = np.unique(s)
    cands = np.concatenate([[v[0]], (v[:-1] + v[1:]) / 2.0, [np.nextafter(v[-1], np.inf)]])
    acc = ((s[None, :] >= cands[:, None]) == y[None, :]).mean(axis=1)
    best = np.flatnonzero(acc == acc.max())[-1]
    return float(cands[best]), float(acc[best])


def fit_thresholds(scores, labels, relations) -> RelationThresholds:
    scores, labels, relations = (np.asarray(x) for x in (scores, labels, relations))
    glob, _ = best_threshold(scores, labels)
    per = {}
    for r in np.unique(relations):
        m = relations == r
        per[int(r)], _ = best_threshold(scores[m], labels[m])
    return RelationThresholds(per, glob)


def classify(scores, labels, relations, thresholds: RelationThresholds) -> float:
    scores, labels, relations = (np.asarray(x) for x in (scores, labels, relations))
    delta = np.array([thresholds[int(r)] for r in relations])
    return float(((scores >= delta) == labels.astype(bool)).mean())


def corrupt_negatives(triples: Sequence[Triple], entities: Sequence[int], known: set, seed=0,
                      max_tries=100) -> list[Triple]:
    """One corrupted (head or tail) negative per positive, avoiding known triples."""
    rng = np.random.default_rng(seed)
    entities = np.asarray(entities)
    out = []
    for h, r, t in triples:
        for _ in range(max_tries):
            e = int(entities[rng.integers(len(entities))])
            neg = Triple(e, r, t) if rng.random() < 0.5 else Triple(h, r, e)
            if neg not in known:
                break
        out.append(neg)
    return out
