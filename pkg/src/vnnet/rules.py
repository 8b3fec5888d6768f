"""Logic-rule parsing and grounding, symmetric-path rule mining, virtual neighbors.

Paths are written over *extended* relation ids: stepping along ``r`` means
following ``(cur, r, next)`` and stepping along ``inv(r)`` means following
``(next, r, cur)``. A symmetric path is a half ``(q1..qk)`` followed by its
mirror ``(inv(qk)..inv(q1))``.
"""

from __future__ import annotations

import json
import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .kg import Adjacency, DataError, ParseError, RelationVocab, Triple, TripleStore, Vocab

DEFAULT_THRESHOLD = 0.8
MIN_SP_SUPPORT = 5


# ---------------------------------------------------------------- logic rules

@dataclass(frozen=True)
class Atom:
    subj: str
    relation: int
    obj: str


@dataclass(frozen=True)
class LogicRule:
    premise: tuple[Atom, ...]
    conclusion: Atom
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if not 1 <= len(self.premise) <= 2:
            raise ValueError("premise must have 1 or 2 atoms")
        bound = {v for a in self.premise for v in (a.subj, a.obj)}
        if not {self.conclusion.subj, self.conclusion.obj} <= bound:
            raise ValueError("conclusion variables must appear in the premise")

    def shared_variables(self) -> set[str]:
        if len(self.premise) < 2:
            return set()
        a, b = self.premise
        return {a.subj, a.obj} & {b.subj, b.obj}


class GroundRule(NamedTuple):
    premises: tuple[Triple, ...]
    conclusion: Triple
    confidence: float
    kind: str  # "logic" or "sp"

    def to_json(self) -> dict:
        return {"kind": self.kind, "confidence": self.confidence,
                "conclusion": list(self.conclusion),
                "premises": [list(p) for p in self.premises]}

    @classmethod
    def from_json(cls, d) -> "GroundRule":
        return cls(tuple(Triple(*p) for p in d["premises"]), Triple(*d["conclusion"]),
                   float(d["confidence"]), d["kind"])


_ATOM = re.compile(r"\(\s*([^,()\s]+)\s*,\s*([^,()]+?)\s*,\s*([^,()\s]+)\s*\)")
_RULE = re.compile(r"^(?P<body>.+?)=>\s*(?P<head>\([^()]*\))(?P<rest>.*)$")


def _parse_atoms(text, relations, path, lineno):
    atoms = []
    for chunk in text.split("&"):
        chunk = chunk.strip()
        m = _ATOM.fullmatch(chunk)
        if not m:
            raise ParseError(path, lineno, f"malformed atom {chunk!r}")
        s, rname, o = m.groups()
        if rname not in relations:
            raise ParseError(path, lineno, f"unknown relation {rname!r}")
        atoms.append(Atom(s, relations[rname], o))
    return atoms


def parse_rule_line(line: str, relations: Vocab, path="<string>", lineno=1) -> LogicRule:
    m = _RULE.match(line.strip())
    if not m:
        raise ParseError(path, lineno, "expected '<premise> => <conclusion> <confidence>'")
    premise = _parse_atoms(m["body"], relations, path, lineno)
    (conclusion,) = _parse_atoms(m["head"], relations, path, lineno)
    rest = m["rest"].split()
    if not rest:
        raise ParseError(path, lineno, "missing confidence")
    try:
        conf = float(rest[0])
    except ValueError:
        raise ParseError(path, lineno, f"bad confidence {rest[0]!r}") from None
    if not 0.0 <= conf <= 1.0:
        raise ParseError(path, lineno, f"confidence {conf} outside [0, 1]")
    try:
        return LogicRule(tuple(premise), conclusion, conf)
    except ValueError as e:
        raise ParseError(path, lineno, str(e)) from None


def parse_rules(path, relations: Vocab, threshold=DEFAULT_THRESHOLD) -> list[LogicRule]:
    """Read the rule DSL, one rule per line; rules below ``threshold`` are dropped."""
    rules = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            rule = parse_rule_line(line, relations, path, lineno)
            if rule.confidence >= threshold:
                rules.append(rule)
    return rules


def format_rule(rule: LogicRule, relations: Vocab) -> str:
    atom = lambda a: f"({a.subj},{relations.name(a.relation)},{a.obj})"
    body = " & ".join(atom(a) for a in rule.premise)
    return f"{body} => {atom(rule.conclusion)}\t{rule.confidence:g}"


class _TripleIndex:
    def __init__(self, triples):
        self.triples = set(triples)
        self.by_rel = defaultdict(list)
        self.tails = defaultdict(list)
        self.heads = defaultdict(list)
        for h, r, t in sorted(self.triples):
            self.by_rel[r].append((h, t))
            self.tails[(r, h)].append(t)
            self.heads[(r, t)].append(h)

    def match(self, atom: Atom, binding: dict):
        s, o = binding.get(atom.subj), binding.get(atom.obj)
        r = atom.relation
        if s is not None and o is not None:
            if Triple(s, r, o) in self.triples:
                yield s, o
        elif s is not None:
            for t in self.tails.get((r, s), ()):
                yield s, t
        elif o is not None:
            for h in self.heads.get((r, o), ()):
                yield h, o
        else:
            yield from self.by_rel.get(r, ())


def _bindings(atoms, index, binding):
    if not atoms:
        yield dict(binding)
        return
    atom, rest = atoms[0], atoms[1:]
    for h, t in index.match(atom, binding):
        if atom.subj == atom.obj and h != t:
            continue
        new = dict(binding)
        if new.setdefault(atom.subj, h) != h or new.setdefault(atom.obj, t) != t:
            continue
        yield from _bindings(rest, index, new)


def ground_logic(rules: Sequence[LogicRule], store: TripleStore) -> list[GroundRule]:
    """All groundings with premises in O ∪ AUX and an unknown conclusion touching E_u."""
    known = store.known()
    index = _TripleIndex(known)
    out = set()
    for rule in rules:
        for b in _bindings(list(rule.premise), index, {}):
            c = Triple(b[rule.conclusion.subj], rule.conclusion.relation, b[rule.conclusion.obj])
            if c in known:
                continue
            if c.head not in store.unseen and c.tail not in store.unseen:
                continue
            premises = tuple(Triple(b[a.subj], a.relation, b[a.obj]) for a in rule.premise)
            out.add(GroundRule(premises, c, rule.confidence, "logic"))
    return sorted(out)


# ------------------------------------------------------- symmetric-path rules

def mirror(half: Sequence[int], relations: RelationVocab) -> tuple[int, ...]:
    """Full symmetric step sequence for a half pattern."""
    half = tuple(half)
    return half + tuple(relations.inverse(q) for q in reversed(half))


def is_symmetric(steps: Sequence[int], relations: RelationVocab) -> bool:
    n = len(steps)
    if n == 0 or n % 2:
        return False
    return all(steps[n - 1 - i] == relations.inverse(steps[i]) for i in range(n // 2))


class SpPath(NamedTuple):
    """A concrete symmetric path: its half pattern and the visited nodes."""
    half: tuple[int, ...]
    nodes: tuple[int, ...]

    @property
    def start(self):
        return self.nodes[0]

    @property
    def end(self):
        return self.nodes[-1]


@dataclass(frozen=True)
class SpRule:
    premise: tuple[int, ...]     # half pattern of sp_i
    conclusion: tuple[int, ...]  # half pattern of sp_j
    confidence: float
    support: int


def step_triple(a: int, r: int, b: int, relations: RelationVocab) -> Triple:
    """The stored triple traversed when stepping from ``a`` to ``b`` along extended ``r``."""
    if relations.is_inverse(r):
        return Triple(b, relations.base(r), a)
    return Triple(a, r, b)


def path_triples(path: SpPath, relations: RelationVocab) -> list[Triple]:
    steps = mirror(path.half, relations)
    return [step_triple(path.nodes[i], steps[i], path.nodes[i + 1], relations)
            for i in range(len(steps))]


def follow_pattern(adj: Adjacency, start: int, steps: Sequence[int], avoid=()):
    """Yield node tuples of every simple path from ``start`` along ``steps``."""
    avoid = set(avoid)

    def rec(nodes):
        i = len(nodes) - 1
        if i == len(steps):
            yield tuple(nodes)
            return
        for nxt in adj.via(nodes[-1], steps[i]):
            if nxt in nodes or nxt in avoid:
                continue
            nodes.append(nxt)
            yield from rec(nodes)
            nodes.pop()

    if start in avoid:
        return
    yield from rec([start])


def _walk(adj, relations, start, k, rng):
    nodes = [start]
    half = []
    for _ in range(k):
        cands = [(r, e) for r, e in adj[nodes[-1]] if e not in nodes]
        if not cands:
            return None
        r, e = cands[rng.integers(len(cands))]
        half.append(r)
        nodes.append(e)
    for i in range(k):
        need = relations.inverse(half[k - 1 - i])
        cands = [e for e in adj.via(nodes[-1], need) if e not in nodes]
        if not cands:
            return None  # second half cannot mirror the first: stop this walk early
        nodes.append(cands[rng.integers(len(cands))])
    return SpPath(tuple(half), tuple(nodes))


def _enumerate_symmetric(adj, relations, start, k):
    """Systematic version of the walk: every branch of every choice point."""
    out = set()

    def first(nodes, half):
        if len(half) == k:
            for tail in second(nodes, half, 0):
                out.add(SpPath(tuple(half), tail))
            return
        for r, e in adj[nodes[-1]]:
            if e in nodes:
                continue
            nodes.append(e)
            half.append(r)
            first(nodes, half)
            half.pop()
            nodes.pop()

    def second(nodes, half, i):
        if i == k:
            yield tuple(nodes)
            return
        need = relations.inverse(half[k - 1 - i])
        for e in adj.via(nodes[-1], need):
            if e in nodes:
                continue
            nodes.append(e)
            yield from second(nodes, half, i + 1)
            nodes.pop()

    first([start], [])
    return out


def discover_sp_patterns(adj: Adjacency, relations: RelationVocab, start: int,
                         walk_budget: int | None = 1000, max_half_len=3,
                         rng: np.random.Generator | None = None) -> set[SpPath]:
    """Symmetric paths from ``start`` with half-length 1..max_half_len.

    ``walk_budget`` random walks are taken per half-length; a walk is
    abandoned as soon as its second half cannot mirror the first.
    ``walk_budget=None`` explores every branch instead of sampling.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    found = set()
    for k in range(1, max_half_len + 1):
        if walk_budget is None:
            found |= _enumerate_symmetric(adj, relations, start, k)
            continue
        for _ in range(walk_budget):
            p = _walk(adj, relations, start, k, rng)
            if p is not None:
                found.add(p)
    return found


def has_pattern_path(adj: Adjacency, start: int, end: int, steps: Sequence[int]) -> bool:
    return any(nodes[-1] == end for nodes in follow_pattern(adj, start, steps))


def score_sp_rule(premise_pairs: set, conclusion_pairs: set) -> tuple[float, int]:
    """Head coverage of sp_i => sp_j over (start, end) node pairs.

    Returns ``(confidence, support)``; zero premise pairs give ``(0.0, 0)``.
    """
    return head_coverage(len(premise_pairs & conclusion_pairs), len(premise_pairs))


def head_coverage(n_both: int, n_premise: int) -> tuple[float, int]:
    if n_premise == 0:
        return 0.0, 0
    return n_both / n_premise, n_premise


def sp_rule_retained(confidence, support, threshold=DEFAULT_THRESHOLD, min_support=MIN_SP_SUPPORT):
    return support >= min_support and confidence >= threshold


def mine_sp_rules(store: TripleStore, adj: Adjacency, walk_budget: int | None = 1000,
                  max_half_len=3, threshold=DEFAULT_THRESHOLD, min_support=MIN_SP_SUPPORT,
                  seed=0) -> list[SpRule]:
    """Mine SP rules from walks starting at every unseen entity.

    Pair counts are pooled over all start entities. Whether a premise pair
    also has the conclusion pattern is checked exactly by pattern-guided
    search rather than relying on the sampled walks.
    """
    rels = store.relations
    rng = np.random.default_rng(seed)
    pairs = defaultdict(set)
    ends_at = defaultdict(lambda: defaultdict(set))  # start -> half -> sampled ends
    for u in sorted(store.unseen):
        for p in discover_sp_patterns(adj, rels, u, walk_budget, max_half_len, rng):
            pairs[p.half].add((p.start, p.end))
            ends_at[u][p.half].add(p.end)
    frequent = {a for a, v in pairs.items() if len(v) >= min_support}
    # both[(a, b)] = #premise pairs (s, e) of a that also have an sp_j path s -> e
    both = defaultdict(int)
    for u, by_half in ends_at.items():
        exact = {b: pattern_ends(adj, u, mirror(b, rels)) for b in by_half}
        for a, ends in by_half.items():
            if a not in frequent:
                continue
            for b, reach in exact.items():
                if b != a:
                    both[(a, b)] += len(ends & reach)
    rules = []
    for (a, b), n in sorted(both.items()):
        conf, sup = head_coverage(n, len(pairs[a]))
        if sp_rule_retained(conf, sup, threshold, min_support):
            rules.append(SpRule(a, b, conf, sup))
    return rules


def pattern_ends(adj: Adjacency, start: int, steps: Sequence[int]) -> set[int]:
    return {nodes[-1] for nodes in follow_pattern(adj, start, steps)}


def ground_sp(rule: SpRule, store: TripleStore, adj: Adjacency) -> list[GroundRule]:
    """Groundings ``x_first1 ∧ x_last1 ∧ x_last2 => x_first2`` of one SP rule.

    For every sp_i path from an unseen entity ``u`` to ``e_end``, the sp_j
    path is traced back from ``e_end`` minus its final edge; when that
    edge (adjacent to ``u``) is missing from O ∪ AUX it becomes the
    conclusion. A symmetric pattern read from its far end is the same
    pattern, so the trace follows sp_j's own first 2k-1 steps.
    """
    rels = store.relations
    known = store.known()
    steps_i = mirror(rule.premise, rels)
    steps_j = mirror(rule.conclusion, rels)
    out = set()
    for u in sorted(store.unseen):
        for nodes_i in follow_pattern(adj, u, steps_i):
            end = nodes_i[-1]
            x_first1 = step_triple(nodes_i[0], steps_i[0], nodes_i[1], rels)
            x_last1 = step_triple(nodes_i[-2], steps_i[-1], end, rels)
            for back in follow_pattern(adj, end, steps_j[:-1], avoid=(u,)):
                m1 = back[-1]
                x_last2 = step_triple(end, steps_j[0], back[1], rels)
                concl = step_triple(u, steps_j[0], m1, rels)
                if concl in known:
                    continue
                out.add(GroundRule((x_first1, x_last1, x_last2), concl, rule.confidence, "sp"))
    return sorted(out)


# ---------------------------------------------------------- virtual neighbors

@dataclass
class VirtualNeighbors:
    triples: list[Triple]
    groundings: dict  # Triple -> list[GroundRule] (length 1 unless keep_all)

    def grounding_id(self, tr) -> int:
        return self._ids[tr]

    def __post_init__(self):
        self._ids = {t: i for i, t in enumerate(self.triples)}

    def best(self, tr) -> GroundRule:
        return self.groundings[tr][0]


def _priority(g: GroundRule):
    return (-g.confidence, 0 if g.kind == "logic" else 1, g.premises)


def generate_virtual_neighbors(groundings: Iterable[GroundRule], known: set,
                               keep_all=False) -> VirtualNeighbors:
    """Collect conclusions into VN triples, one grounding per triple by default.

    The retained grounding is the most confident one; ties prefer logic
    rules, then the lexicographically smallest premise tuple. With
    ``keep_all`` every grounding is kept (sorted by the same priority).
    """
    by_triple = defaultdict(list)
    for g in groundings:
        if g.conclusion in known:
            continue
        by_triple[g.conclusion].append(g)
    table = {}
    for tr, gs in by_triple.items():
        gs = sorted(set(gs), key=_priority)
        table[tr] = gs if keep_all else gs[:1]
    return VirtualNeighbors(sorted(table), table)


# ------------------------------------------------------------------- file I/O

def _fmt_steps(half, relations: RelationVocab):
    return ",".join(("bwd:" if relations.is_inverse(q) else "fwd:") + relations.name(relations.base(q))
                    for q in half)


def format_sp_rule(rule: SpRule, relations: RelationVocab) -> str:
    return (f"sp[{_fmt_steps(rule.premise, relations)}] => sp[{_fmt_steps(rule.conclusion, relations)}]"
            f"\t{rule.confidence:.6g}\t{rule.support}")


_SP = re.compile(r"^sp\[(?P<a>[^\]]*)\]\s*=>\s*sp\[(?P<b>[^\]]*)\]\s+(?P<conf>\S+)\s+(?P<sup>\S+)\s*$")


def _parse_steps(text, relations, path, lineno):
    half = []
    for tok in text.split(","):
        d, _, name = tok.strip().partition(":")
        if d not in ("fwd", "bwd") or name not in relations:
            raise ParseError(path, lineno, f"bad path step {tok!r}")
        r = relations[name]
        half.append(relations.inverse(r) if d == "bwd" else r)
    if not 1 <= len(half) <= 3:
        raise ParseError(path, lineno, "half pattern length must be 1..3")
    return tuple(half)


def write_sp_rules(path, rules, relations):
    with open(path, "w", encoding="utf-8") as f:
        for r in rules:
            f.write(format_sp_rule(r, relations) + "\n")


def parse_sp_rules(path, relations: RelationVocab, threshold=DEFAULT_THRESHOLD,
                   min_support=MIN_SP_SUPPORT) -> list[SpRule]:
    rules = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            m = _SP.match(line.strip())
            if not m:
                raise ParseError(path, lineno, "malformed SP rule")
            conf, sup = float(m["conf"]), int(m["sup"])
            if not 0.0 <= conf <= 1.0:
                raise ParseError(path, lineno, f"confidence {conf} outside [0, 1]")
            if sp_rule_retained(conf, sup, threshold, min_support):
                rules.append(SpRule(_parse_steps(m["a"], relations, path, lineno),
                                    _parse_steps(m["b"], relations, path, lineno), conf, sup))
    return rules


def write_virtual(path, vn: VirtualNeighbors, entities: Vocab, relations: Vocab):
    """TSV: head, relation, tail, confidence, grounding id."""
    with open(path, "w", encoding="utf-8") as f:
        for i, tr in enumerate(vn.triples):
            g = vn.best(tr)
            f.write(f"{entities.name(tr.head)}\t{relations.name(tr.relation)}\t"
                    f"{entities.name(tr.tail)}\t{g.confidence:.6g}\t{i}\n")


def write_groundings(path, vn: VirtualNeighbors):
    with open(path, "w", encoding="utf-8") as f:
        for i, tr in enumerate(vn.triples):
            for g in vn.groundings[tr]:
                f.write(json.dumps({"id": i, **g.to_json()}) + "\n")


def read_groundings(path) -> VirtualNeighbors:
    table = defaultdict(list)
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                g = GroundRule.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as e:
                raise ParseError(path, lineno, f"bad grounding record: {e}") from None
            table[g.conclusion].append(g)
    for tr in table:
        table[tr].sort(key=_priority)
    return VirtualNeighbors(sorted(table), dict(table))


def check_groundings(groundings: Iterable[GroundRule], store: TripleStore):
    known = store.known()
    for g in groundings:
        if any(p not in known for p in g.premises):
            raise DataError(f"grounding premise not in O ∪ AUX: {g}")
        if g.conclusion in known:
            raise DataError(f"grounding conclusion already known: {g}")
