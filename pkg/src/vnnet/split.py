"""Manufacture unseen entities from a standard benchmark split."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kg import RelationVocab, Triple, TripleStore, Vocab, neighbor_ratio_stats

STRATEGIES = ("subject", "object", "both")


@dataclass(frozen=True)
class SplitConfig:
    strategy: str = "subject"
    fraction: float | None = None  # percent of test triples, e.g. 10 for Subject-10
    count: int | None = None       # absolute number of sampled test triples
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", self.strategy.lower())
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if (self.fraction is None) == (self.count is None):
            raise ValueError("exactly one of fraction or count must be given")
        if self.fraction is not None and not 0 < self.fraction <= 100:
            raise ValueError("fraction must be in (0, 100]")
        if self.count is not None and self.count < 1:
            raise ValueError("count must be >= 1")

    def sample_size(self, n_test: int) -> int:
        if self.count is not None:
            return self.count
        return max(1, int(math.floor(n_test * self.fraction / 100.0 + 0.5)))


def sample_unseen(test_triples: Sequence[Triple], train_triples: Sequence[Triple],
                  config: SplitConfig) -> tuple[list[Triple], set[int]]:
    """Sample candidate test triples and derive the unseen entity set from them.

    Returns the filtered candidate test triples (in original order) and the
    unseen entities. Entities without any neighbor in ``train_triples`` are
    dropped from the unseen set, then test triples with no unseen endpoint
    are dropped.
    """
    test_triples = list(test_triples)
    if not test_triples:
        raise ValueError("test_triples is empty")
    k = config.sample_size(len(test_triples))
    if k > len(test_triples):
        raise ValueError(f"cannot sample {k} triples from {len(test_triples)}")
    rng = np.random.default_rng(config.seed)
    picked = np.sort(rng.choice(len(test_triples), size=k, replace=False))
    candidate = [test_triples[i] for i in picked]

    unseen = set()
    for h, _, t in candidate:
        if config.strategy in ("subject", "both"):
            unseen.add(h)
        if config.strategy in ("object", "both"):
            unseen.add(t)
    in_train = {e for h, _, t in train_triples for e in (h, t)}
    unseen &= in_train
    candidate = [tr for tr in candidate if tr.head in unseen or tr.tail in unseen]
    return candidate, unseen


def split_training(train_triples: Sequence[Triple], unseen: set[int]):
    """Partition training triples into (O, AUX, dropped) by unseen-endpoint count."""
    observed, aux, dropped = [], [], []
    for tr in train_triples:
        n = (tr.head in unseen) + (tr.tail in unseen)
        (observed, aux, dropped)[n].append(tr)
    return observed, aux, dropped


def filter_validation(valid_triples: Sequence[Triple], unseen: set[int]) -> list[Triple]:
    return [tr for tr in valid_triples if tr.head not in unseen and tr.tail not in unseen]


def make_split(train, valid, test, config: SplitConfig, entities: Vocab,
               relations: RelationVocab) -> tuple[TripleStore, dict]:
    """Run the full protocol and return the resulting store plus a count summary.

    Test triples whose unseen endpoint ends up with no auxiliary edge are
    removed as well, since such an entity cannot be embedded.
    """
    candidate, unseen = sample_unseen(test, train, config)
    observed, aux, dropped = split_training(train, unseen)
    valid_kept = filter_validation(valid, unseen)

    aux_deg = {}
    for h, _, t in aux:
        for e in (h, t):
            if e in unseen:
                aux_deg[e] = aux_deg.get(e, 0) + 1
    final_test = [tr for tr in candidate
                  if all(aux_deg.get(e, 0) > 0 for e in (tr.head, tr.tail) if e in unseen)]

    entities.freeze()
    relations.freeze()
    store = TripleStore(entities, relations, observed=set(observed), auxiliary=set(aux),
                        validation=set(valid_kept), test=set(final_test), unseen=set(unseen))
    store.check_invariants()
    before_u, before_o = neighbor_ratio_stats(store, include_virtual=False)
    summary = {
        "strategy": config.strategy,
        "fraction": config.fraction,
        "count": config.count,
        "seed": config.seed,
        "train_in": len(train),
        "observed": len(store.observed),
        "auxiliary": len(store.auxiliary),
        "dropped": len(dropped),
        "unseen_entities": len(unseen),
        "valid": len(store.validation),
        "test": len(store.test),
        "test_removed_no_aux": len(candidate) - len(final_test),
        "avg_ratio_unseen_before": before_u,
        "avg_ratio_observed_before": before_o,
    }
    return store, summary
