"""Synthetic knowledge graphs with planted rules, for fixtures and desk-scale experiments."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kg import RelationVocab, Triple, Vocab, write_triples
from .rules import LogicRule, _bindings, _TripleIndex, format_rule, parse_rule_line


@dataclass
class SyntheticKG:
    entities: Vocab
    relations: RelationVocab
    train: list
    valid: list
    test: list
    rule_lines: list  # rule DSL text (relation names, no confidence)

    def write(self, directory):
        """Write train/valid/test TSVs (surface forms) plus ``rules.txt``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, trs in (("train", self.train), ("valid", self.valid), ("test", self.test)):
            write_triples(d / f"{name}.txt", trs, self.entities, self.relations)
        rules = self.rules(self.train + self.valid + self.test)
        with open(d / "rules.txt", "w", encoding="utf-8") as f:
            for r in rules:
                f.write(format_rule(r, self.relations) + "\n")
        return d

    def rules(self, triples) -> list[LogicRule]:
        """Planted rules with standard confidence measured on ``triples``."""
        out = []
        for line in self.rule_lines:
            r = parse_rule_line(line + "\t1.0", self.relations)
            out.append(LogicRule(r.premise, r.conclusion, rule_confidence(r, triples)))
        return out


def rule_confidence(rule: LogicRule, triples) -> float:
    """#(body and head hold) / #(body holds) over distinct (x, y) bindings."""
    index = _TripleIndex(triples)
    c = rule.conclusion
    body, both = set(), set()
    for b in _bindings(list(rule.premise), index, {}):
        pair = (b[c.subj], b[c.obj])
        body.add(pair)
        if Triple(pair[0], c.relation, pair[1]) in index.triples:
            both.add(pair)
    return len(both) / len(body) if body else 0.0


def planted_kg(num_entities=300, num_clusters=10, likes_per_entity=3, rule_prob=0.9,
               noise_per_entity=1, valid_frac=0.1, test_frac=0.1, seed=0) -> SyntheticKG:
    """Clustered KG with an implication rule and a composition rule planted.

    * ``likes(x, y)``: ``y`` drawn from the cluster paired with ``x``'s cluster.
    * ``fan(x, y) <= likes(x, y)`` with probability ``rule_prob``, so the
      converse rule holds exactly.
    * ``peer(x, z)``: one same-cluster partner per entity.
    * ``recommends(x, y) <= peer(x, z) & likes(z, y)`` with probability ``rule_prob``.
    * ``knows``: unstructured noise edges.
    """
    rng = np.random.default_rng(seed)
    entities = Vocab(f"e{i}" for i in range(num_entities))
    relations = RelationVocab(["likes", "fan", "peer", "recommends", "knows"])
    entities.freeze()
    relations.freeze()
    likes, fan, peer, rec, knows = range(5)
    cluster = rng.integers(num_clusters, size=num_entities)
    members = [np.flatnonzero(cluster == c) for c in range(num_clusters)]
    # clusters are paired off so that ``likes`` is symmetric at cluster level,
    # which symmetric decoders such as DistMult can represent
    order = rng.permutation(num_clusters)
    target = np.arange(num_clusters)
    for a, b in zip(order[0::2], order[1::2]):
        target[a], target[b] = b, a
    triples = set()

    for x in range(num_entities):
        pool = members[target[cluster[x]]]
        pool = pool[pool != x]
        for y in rng.choice(pool, size=min(likes_per_entity, len(pool)), replace=False):
            triples.add(Triple(x, likes, int(y)))
    for x in range(num_entities):
        same = members[cluster[x]]
        same = same[same != x]
        if len(same):
            triples.add(Triple(x, peer, int(rng.choice(same))))
    for h, r, t in sorted(triples):
        if r == likes and rng.random() < rule_prob:
            triples.add(Triple(h, fan, t))
    out_likes = {}
    for h, r, t in triples:
        if r == likes:
            out_likes.setdefault(h, []).append(t)
    for h, r, z in sorted(triples):
        if r != peer:
            continue
        for y in sorted(out_likes.get(z, ())):
            if y != h and rng.random() < rule_prob:
                triples.add(Triple(h, rec, y))
    for x in range(num_entities):
        for y in rng.choice(num_entities, size=noise_per_entity, replace=False):
            if y != x:
                triples.add(Triple(x, knows, int(y)))

    triples = sorted(triples)
    order = rng.permutation(len(triples))
    n_valid = int(len(triples) * valid_frac)
    n_test = int(len(triples) * test_frac)
    valid = [triples[i] for i in sorted(order[:n_valid])]
    test = [triples[i] for i in sorted(order[n_valid:n_valid + n_test])]
    train = [triples[i] for i in sorted(order[n_valid + n_test:])]
    rule_lines = ["(x,likes,y) => (x,fan,y)", "(x,fan,y) => (x,likes,y)",
                  "(x,peer,z) & (z,likes,y) => (x,recommends,y)"]
    return SyntheticKG(entities, relations, train, valid, test, rule_lines)
