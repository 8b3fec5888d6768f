import numpy as np
import pytest

from vnnet.kg import RelationVocab, Triple, TripleStore, Vocab


def make_vocabs(num_entities, relation_names):
    ents = Vocab(f"e{i}" for i in range(num_entities)).freeze()
    rels = RelationVocab(relation_names).freeze()
    return ents, rels


def random_store(num_entities=10, num_relations=3, num_observed=20, num_unseen=2, aux_per_unseen=2,
                 seed=0, test_size=6, valid_size=4):
    """Small store satisfying the partition invariants; unseen entities are the last ids."""
    rng = np.random.default_rng(seed)
    ents, rels = make_vocabs(num_entities, [f"r{i}" for i in range(num_relations)])
    unseen = set(range(num_entities - num_unseen, num_entities))
    seen = [e for e in range(num_entities) if e not in unseen]

    def seen_triple():
        h, t = rng.choice(seen, 2, replace=False)
        return Triple(int(h), int(rng.integers(num_relations)), int(t))

    observed = set()
    while len(observed) < num_observed:
        observed.add(seen_triple())
    aux = set()
    for u in sorted(unseen):
        while sum(1 for a in aux if u in (a.head, a.tail)) < aux_per_unseen:
            o = int(rng.choice(seen))
            r = int(rng.integers(num_relations))
            aux.add(Triple(u, r, o) if rng.random() < 0.5 else Triple(o, r, u))
    test = set()
    for u in sorted(unseen):
        for _ in range(test_size // max(1, num_unseen)):
            tr = Triple(u, int(rng.integers(num_relations)), int(rng.choice(seen)))
            if tr not in aux:
                test.add(tr)
    valid = set()
    while len(valid) < valid_size:
        tr = seen_triple()
        if tr not in observed:
            valid.add(tr)
    store = TripleStore(ents, rels, observed=observed, auxiliary=aux, validation=valid, test=test,
                        unseen=unseen)
    store.check_invariants()
    return store


@pytest.fixture
def tiny_store():
    return random_store()


@pytest.fixture
def chain_store():
    """Hand-built store: e0 -r0-> e1 -r1-> e2, unseen u=e3 with (e3, r0, e1)."""
    ents, rels = make_vocabs(4, ["r0", "r1"])
    return TripleStore(ents, rels, observed={Triple(0, 0, 1), Triple(1, 1, 2)},
                       auxiliary={Triple(3, 0, 1)}, test={Triple(3, 1, 2)}, unseen={3})


def micro_setup(ablation="full", decoder="distmult", dim=8, layers=2, seed=0, dropout=0.0, virtual=()):
    """10 entities, 3 relations, two unseen entities; returns (store, model)."""
    from vnnet.model import EncoderConfig, EncoderGraph, VNModel

    store = random_store(num_entities=10, num_relations=3, num_observed=14, seed=seed)
    cfg = EncoderConfig(dim=dim, num_structure_layers=layers, dropout=dropout, decoder=decoder,
                        ablation=ablation)
    graph = EncoderGraph.from_store(store, virtual)
    return store, VNModel(cfg, store.num_entities, store.relations, graph, seed=seed)


def fixture_30(seed=0, ablation="full"):
    """30-entity store with four unseen entities and an untrained model over it."""
    from vnnet.model import EncoderConfig, EncoderGraph, VNModel

    store = random_store(num_entities=30, num_relations=3, num_observed=80, num_unseen=4, aux_per_unseen=3,
                         seed=seed, test_size=24, valid_size=8)
    cfg = EncoderConfig(dim=8, num_structure_layers=2, dropout=0.0, ablation=ablation)
    model = VNModel(cfg, store.num_entities, store.relations, EncoderGraph.from_store(store), seed=seed)
    return store, model


def ring_store():
    """10 observed entities on a directed ring plus a skip relation."""
    ents, rels = make_vocabs(10, ["next", "skip"])
    obs = {Triple(i, 0, (i + 1) % 10) for i in range(10)} | {Triple(i, 1, (i + 3) % 10) for i in range(0, 10, 2)}
    return TripleStore(ents, rels, observed=obs)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, from the properties the tests record."""
    rows = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if rep.when == "call" and "criterion" in props:
                rows.append((props["criterion"], outcome, props.get("detail", "")))
    if rows:
        terminalreporter.section("acceptance criteria")
        for name, outcome, detail in sorted(rows, key=lambda r: int(r[0].split()[0])):
            terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}  {detail}")
