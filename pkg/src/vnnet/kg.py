"""Triple store: vocabularies, partitioned triple sets and neighborhood index."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

PARTITIONS = ("observed", "auxiliary", "virtual")

MANIFEST_NAME = "manifest.json"
DEFAULT_FILES = {
    "observed": "observed.tsv",
    "auxiliary": "auxiliary.tsv",
    "virtual": "virtual.tsv",
    "validation": "valid.tsv",
    "test": "test.tsv",
}


class DataError(Exception):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class InvariantError(DataError):
    pass


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class Vocab:
    """Dense surface-form <-> id map, ids assigned in first-appearance order."""

    def __init__(self, names: Iterable[str] = ()):
        self._ids: dict[str, int] = {}
        self._names: list[str] = []
        self.frozen = False
        for n in names:
            self.add(n)

    def add(self, name: str) -> int:
        idx = self._ids.get(name)
        if idx is not None:
            return idx
        if self.frozen:
            raise KeyError(name)
        idx = len(self._names)
        self._ids[name] = idx
        self._names.append(name)
        return idx

    def freeze(self):
        self.frozen = True
        return self

    def __getitem__(self, name: str) -> int:
        return self._ids[name]

    def __contains__(self, name) -> bool:
        return name in self._ids

    def __len__(self) -> int:
        return len(self._names)

    def name(self, idx: int) -> str:
        return self._names[idx]

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for i, n in enumerate(self._names):
                f.write(f"{n}\t{i}\n")

    @classmethod
    def load(cls, path):
        pairs = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ParseError(path, lineno, "expected surface_form<TAB>id")
                pairs.append((int(parts[1]), parts[0]))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ParseError(path, 0, "vocabulary ids are not contiguous from 0")
        return cls(n for _, n in pairs)


class RelationVocab(Vocab):
    """Base relations plus derived inverse ids and one self-connection id.

    With ``R`` base relations, ``inv(r) = r + R`` for base ``r`` (and back),
    and the self-connection relation is ``2R``. Derived ids are only defined
    once the vocabulary is frozen.
    """

    @property
    def num_base(self) -> int:
        return len(self)

    @property
    def num_extended(self) -> int:
        return 2 * len(self) + 1

    @property
    def self_loop(self) -> int:
        self._require_frozen()
        return 2 * len(self)

    def inverse(self, r: int) -> int:
        self._require_frozen()
        n = len(self)
        if 0 <= r < n:
            return r + n
        if n <= r < 2 * n:
            return r - n
        raise ValueError(f"relation id {r} has no inverse")

    def is_inverse(self, r: int) -> bool:
        return len(self) <= r < 2 * len(self)

    def base(self, r: int) -> int:
        return r - len(self) if self.is_inverse(r) else r

    def ext_name(self, r: int) -> str:
        if r == 2 * len(self):
            return "<self>"
        if self.is_inverse(r):
            return "inv:" + self.name(r - len(self))
        return self.name(r)

    def _require_frozen(self):
        if not self.frozen:
            raise RuntimeError("relation vocabulary must be frozen before using derived ids")


def load_triples(path, entities: Vocab, relations: Vocab) -> list[Triple]:
    """Read a ``head<TAB>relation<TAB>tail`` file, interning new surface forms.

    Duplicates are preserved; blank lines are skipped. With frozen
    vocabularies an unknown surface form is a :class:`ParseError`.
    """
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, lineno, f"expected 3 tab-separated fields, got {len(parts)}")
            h, r, t = parts
            try:
                out.append(Triple(entities.add(h), relations.add(r), entities.add(t)))
            except KeyError as e:
                raise ParseError(path, lineno, f"unknown surface form {e.args[0]!r}") from None
    return out


def load_labeled_triples(path, entities: Vocab, relations: Vocab) -> list[tuple[Triple, int]]:
    """Like :func:`load_triples` but with a fourth label column (1 / 0 / -1)."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) == 3:
                label = 1
            elif len(parts) == 4:
                label = 1 if parts[3].strip() in ("1", "+1", "true", "True") else 0
            else:
                raise ParseError(path, lineno, "expected 3 or 4 tab-separated fields")
            try:
                tr = Triple(entities.add(parts[0]), relations.add(parts[1]), entities.add(parts[2]))
            except KeyError as e:
                raise ParseError(path, lineno, f"unknown surface form {e.args[0]!r}") from None
            out.append((tr, label))
    return out


def write_triples(path, triples: Iterable[Triple], entities: Vocab, relations: Vocab, extra=None):
    with open(path, "w", encoding="utf-8") as f:
        for i, tr in enumerate(triples):
            row = [entities.name(tr.head), relations.name(tr.relation), entities.name(tr.tail)]
            if extra is not None:
                row.extend(str(x) for x in extra[i])
            f.write("\t".join(row) + "\n")


@dataclass
class TripleStore:
    entities: Vocab
    relations: RelationVocab
    observed: set = field(default_factory=set)
    auxiliary: set = field(default_factory=set)
    virtual: set = field(default_factory=set)
    validation: set = field(default_factory=set)
    test: set = field(default_factory=set)
    unseen: set = field(default_factory=set)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def observed_entities(self) -> list[int]:
        return [e for e in range(len(self.entities)) if e not in self.unseen]

    def known(self) -> set:
        """O ∪ AUX: the triples treated as facts by rule grounding."""
        return self.observed | self.auxiliary

    def partition(self, name: str) -> set:
        return getattr(self, name)

    def add_virtual(self, triples: Iterable[Triple]) -> int:
        """Add virtual triples, skipping any already in O ∪ AUX. Returns the count added."""
        before = len(self.virtual)
        for tr in triples:
            tr = Triple(*tr)
            if tr in self.observed or tr in self.auxiliary:
                continue
            self.virtual.add(tr)
        return len(self.virtual) - before

    def check_invariants(self):
        problems = []
        if self.observed & self.auxiliary:
            problems.append("observed and auxiliary overlap")
        if self.virtual & (self.observed | self.auxiliary):
            problems.append("virtual overlaps observed/auxiliary")
        u = self.unseen
        for name in ("observed", "validation"):
            bad = [t for t in getattr(self, name) if t.head in u or t.tail in u]
            if bad:
                problems.append(f"{len(bad)} {name} triples touch unseen entities, e.g. {bad[0]}")
        bad = [t for t in self.auxiliary if (t.head in u) == (t.tail in u)]
        if bad:
            problems.append(f"{len(bad)} auxiliary triples without exactly one unseen endpoint, e.g. {bad[0]}")
        ne, nr = len(self.entities), len(self.relations)
        for name in ("observed", "auxiliary", "virtual", "validation", "test"):
            for t in getattr(self, name):
                if not (0 <= t.head < ne and 0 <= t.tail < ne and 0 <= t.relation < nr):
                    problems.append(f"{name} triple {t} has out-of-range ids")
                    break
        if problems:
            raise InvariantError("; ".join(problems))


class Adjacency:
    """Per-entity bidirectional edge lists over a chosen set of partitions.

    An edge ``(e, r, e')`` is recorded at ``e`` as ``(r, e')`` and at ``e'``
    as ``(inv(r), e)``.
    """

    def __init__(self, num_entities: int):
        self._edges: list[list[tuple[int, int]]] = [[] for _ in range(num_entities)]
        self._via: dict[tuple[int, int], list[int]] = defaultdict(list)

    def _add(self, e, r, other):
        self._edges[e].append((r, other))
        self._via[(e, r)].append(other)

    def __getitem__(self, e: int) -> list[tuple[int, int]]:
        return self._edges[e]

    def __len__(self):
        return len(self._edges)

    def via(self, e: int, r: int) -> list[int]:
        """Neighbors reached from ``e`` along extended relation ``r``."""
        return self._via.get((e, r), [])

    def degree(self, e: int) -> int:
        return len(self._edges[e])


def build_index(store: TripleStore, partitions=("observed",)) -> Adjacency:
    for p in partitions:
        if p not in PARTITIONS:
            raise ValueError(f"unknown partition {p!r}; expected a subset of {PARTITIONS}")
    rels = store.relations
    adj = Adjacency(store.num_entities)
    triples = set()
    for p in partitions:
        triples |= store.partition(p)
    for h, r, t in sorted(triples):
        adj._add(h, r, t)
        adj._add(t, rels.inverse(r), h)
    return adj


def neighbor_ratio_stats(store: TripleStore, include_virtual=True) -> tuple[float, float]:
    """Average (#known neighbor triples) / (#test triples) for unseen and observed test entities.

    Entities without test triples are excluded; an empty group yields NaN.
    """
    known = store.observed | store.auxiliary
    if include_virtual:
        known = known | store.virtual
    n_known = defaultdict(int)
    for h, _, t in known:
        n_known[h] += 1
        if t != h:
            n_known[t] += 1
    n_test = defaultdict(int)
    for h, _, t in store.test:
        n_test[h] += 1
        if t != h:
            n_test[t] += 1
    unseen, observed = [], []
    for e, n in n_test.items():
        (unseen if e in store.unseen else observed).append(n_known[e] / n)
    avg = lambda xs: sum(xs) / len(xs) if xs else math.nan
    return avg(unseen), avg(observed)


def save_store(store: TripleStore, directory, extra_manifest=None) -> Path:
    """Write vocabularies, the five triple files, the unseen list and a manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    store.entities.save(d / "entities.tsv")
    store.relations.save(d / "relations.tsv")
    for part, fname in DEFAULT_FILES.items():
        write_triples(d / fname, sorted(store.partition(part)), store.entities, store.relations)
    with open(d / "unseen.txt", "w", encoding="utf-8") as f:
        for e in sorted(store.unseen):
            f.write(store.entities.name(e) + "\n")
    manifest = dict(DEFAULT_FILES)
    manifest.update(entities="entities.tsv", relations="relations.tsv", unseen="unseen.txt")
    if extra_manifest:
        manifest.update(extra_manifest)
    old = d / MANIFEST_NAME
    if old.exists():
        prev = json.loads(old.read_text())
        for k, v in prev.items():
            manifest.setdefault(k, v)
    (d / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(str(path))
    return json.loads(path.read_text())


def update_manifest(directory, **entries):
    m = read_manifest(directory)
    m.update(entries)
    (Path(directory) / MANIFEST_NAME).write_text(json.dumps(m, indent=2, sort_keys=True))


def load_store(directory) -> TripleStore:
    """Load a store written by :func:`save_store`; vocabularies come back frozen."""
    d = Path(directory)
    m = read_manifest(d)
    entities = Vocab.load(d / m["entities"]).freeze()
    relations = RelationVocab.load(d / m["relations"]).freeze()
    parts = {}
    for part in DEFAULT_FILES:
        fname = m.get(part)
        path = d / fname if fname else None
        if path is None or not path.exists():
            if part == "virtual":
                parts[part] = set()
                continue
            raise FileNotFoundError(str(path or d / DEFAULT_FILES[part]))
        parts[part] = set(load_triples(path, entities, relations))
    unseen = set()
    if m.get("unseen") and (d / m["unseen"]).exists():
        with open(d / m["unseen"], encoding="utf-8") as f:
            for line in f:
                name = line.rstrip("\n")
                if name:
                    unseen.add(entities[name])
    else:
        in_o = {e for t in parts["observed"] for e in (t.head, t.tail)}
        unseen = {e for t in parts["auxiliary"] for e in (t.head, t.tail) if e not in in_o}
    return TripleStore(entities, relations, unseen=unseen, **parts)
