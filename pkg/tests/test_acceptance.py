"""Acceptance criteria, one test each.

Every test records a ``criterion`` property; the terminal summary in
conftest turns those into one PASS/FAIL line per criterion. Run alone with
``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

import time

import numpy as np
import pytest

from vnnet import autodiff as ad
from vnnet.evaluate import evaluate_link_prediction
from vnnet.kg import RelationVocab, Triple, TripleStore, Vocab, build_index
from vnnet.model import EncoderConfig, EncoderGraph, VNModel
from vnnet.pipeline import compare_ablations
from vnnet.rules import GroundRule, VirtualNeighbors, discover_sp_patterns, mine_sp_rules
from vnnet.softlabel import implication_truth, solve_soft_labels, t_and, t_not, t_or
from vnnet.split import SplitConfig, make_split
from vnnet.synthetic import planted_kg
from vnnet.train import TrainConfig, Trainer

from conftest import fixture_30, random_store, ring_store
from oracles import brute_metrics, brute_ranking, dfs_symmetric_paths, qp_soft_label


@pytest.fixture
def criterion(record_property):
    def record(name, detail=""):
        record_property("criterion", name)
        record_property("detail", detail)
    return record


def micro_trainer(**train_kw):
    store = random_store(num_entities=10, num_relations=3, num_observed=14, seed=0)
    u = min(store.unseen)
    obs = sorted(store.observed)
    gs = {}
    for i, (r, prem) in enumerate([(0, obs[0]), (2, obs[1])]):
        x = Triple(u, r, prem.tail)
        gs[x] = [GroundRule((prem,), x, 0.9 - 0.05 * i, "logic" if i == 0 else "sp")]
    vn = VirtualNeighbors(sorted(gs), gs)
    cfg = EncoderConfig(dim=8, num_structure_layers=2, dropout=0.0, decoder="distmult", ablation="full")
    tc = TrainConfig(**{"epochs": 1, "num_batches": 1, "num_negatives": 2, "eval_every": 0, "penalty_c": 0.5,
                        **train_kw})
    return Trainer(store, cfg, tc, vn)


def test_1_gradient_correctness(criterion):
    t0 = time.time()
    tr = micro_trainer()
    hard, labels = tr._hard_batch(tr.positives)
    vn_batch = tr.vn_triples
    soft = tr.soft_labels(vn_batch)
    rep = ad.grad_check(lambda: tr.batch_loss(hard, labels, vn_batch, soft, train=False), tr.params, h=1e-5)
    secs = time.time() - t0
    criterion("1 gradient correctness", f"max rel err {rep.max_rel_error:.2e} over {len(tr.params)} params, "
                                        f"{secs:.1f}s")
    assert set(tr.params) >= {"H0", "W1", "W2", "alpha1", "alpha2", "u", "W_e", "W_q", "Z", "R"}
    assert rep.max_rel_error < 1e-4
    assert secs < 30


def test_2_soft_label_exactness(criterion):
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst, clamped = 0.0, 0
    for i in range(20):
        C = [0.01, 0.1, 1.0][i % 3]
        # every fourth instance starts near 1 so the upper clamp is active
        I = float(rng.uniform(0.97, 1.0)) if i % 4 == 0 else float(rng.uniform(0, 1))
        groundings = [(float(rng.uniform(0.8, 1.0)), rng.uniform(0, 1, size=rng.integers(1, 4)).tolist())
                      for _ in range(rng.integers(1, 4))]
        x = Triple(99, 0, 98)
        gs, scores = [], {x: I}
        for k, (lam, truths) in enumerate(groundings):
            prem = tuple(Triple(k, j + 1, 50 + j) for j in range(len(truths)))
            scores.update(zip(prem, truths))
            gs.append(GroundRule(prem, x, lam, "logic"))
        s = solve_soft_labels([x], {x: gs}, scores, C)[x]
        ref = qp_soft_label(I, groundings, C)
        clamped += s == 1.0
        worst = max(worst, abs(s - ref))
    secs = time.time() - t0
    criterion("2 soft-label exactness", f"max |closed form - PGD| {worst:.1e}, {clamped} clamped, {secs:.1f}s")
    assert worst < 1e-6 and clamped > 0 and secs < 10


def test_3_tnorm_identities(criterion):
    t0 = time.time()
    rng = np.random.default_rng(0)
    a = np.concatenate([[0.0, 1.0], rng.uniform(0, 1, 10_000)])
    b = rng.permutation(a)
    bad = 0
    for x, y in zip(a.tolist(), b.tolist()):
        vals = (t_and(x, y), t_or(x, y), t_not(x), implication_truth(x, y))
        bad += not all(-1e-15 <= v <= 1 + 1e-15 for v in vals)
        bad += t_and(1.0, x) != x or t_or(0.0, x) != x
        bad += abs(t_not(t_not(x)) - x) > 1e-15
        bad += implication_truth(0.0, y) != 1.0 or abs(implication_truth(1.0, y) - y) > 1e-15
    secs = time.time() - t0
    criterion("3 t-norm identities", f"{len(a)} samples, {bad} violations, {secs:.1f}s")
    assert bad == 0 and secs < 5


def test_4_ranking_oracle(criterion):
    t0 = time.time()
    store, model = fixture_30(0)
    report, records, _ = evaluate_link_prediction(model, store, store.test)
    ranks = brute_ranking(model, store, store.test)
    expected = brute_metrics(ranks)
    got = report.to_dict()
    same = [r for *_, r in records] == ranks and all(got[k] == v for k, v in expected.items())
    secs = time.time() - t0
    criterion("4 ranking oracle", f"{len(ranks)} queries, MRR {got['MRR']:.4f}, exact={same}, {secs:.1f}s")
    assert store.num_entities == 30 and same and secs < 10


def test_5_split_invariants(criterion):
    t0 = time.time()
    kg = planted_kg(num_entities=60, num_clusters=4, seed=0)
    failures = 0
    for seed in range(100):
        cfg = SplitConfig(["subject", "object", "both"][seed % 3], fraction=15, seed=seed)
        store, summary = make_split(kg.train, kg.valid, kg.test, cfg, kg.entities, kg.relations)
        store.check_invariants()
        failures += summary["observed"] + summary["auxiliary"] + summary["dropped"] != len(kg.train)
        if seed % 10 == 0:
            again, summary2 = make_split(kg.train, kg.valid, kg.test, cfg, kg.entities, kg.relations)
            failures += summary2 != summary or again.observed != store.observed or again.unseen != store.unseen
    secs = time.time() - t0
    criterion("5 split invariants", f"{len(kg.train)} training triples, 100 splits, {failures} failures, "
                                    f"{secs:.1f}s")
    assert len(kg.train) >= 500 and failures == 0 and secs < 30


def table_instance():
    """An unseen entity with five sp_i partners, four of which are also sp_j partners."""
    names = ["Bob"] + [f"p{i}" for i in range(5)] + [f"m{i}" for i in range(5)] + [f"n{i}" for i in range(4)]
    ents = Vocab(names).freeze()
    rels = RelationVocab(["actedIn", "starredIn"]).freeze()
    bob = ents["Bob"]
    aux, obs = set(), set()
    for i in range(5):
        aux.add(Triple(bob, 0, ents[f"m{i}"]))
        obs.add(Triple(ents[f"p{i}"], 0, ents[f"m{i}"]))
    for i in range(4):
        aux.add(Triple(bob, 1, ents[f"n{i}"]))
        obs.add(Triple(ents[f"p{i}"], 1, ents[f"n{i}"]))
    return TripleStore(ents, rels, observed=obs, auxiliary=aux, unseen={bob})


def test_6_head_coverage(criterion):
    store = table_instance()
    store.check_invariants()
    rules = mine_sp_rules(store, build_index(store, ("observed", "auxiliary")), walk_budget=None,
                          max_half_len=1, threshold=0.8, min_support=5)
    found = [(r.premise, r.conclusion, r.confidence, r.support) for r in rules]
    criterion("6 head coverage", f"mined {found}")
    assert found == [((0,), (1,), 0.8, 5)]


def test_7_sp_mining_oracle(criterion):
    mismatches, lengths = 0, set()
    for seed in range(5):
        store = random_store(num_entities=20, num_relations=2, num_observed=30, num_unseen=3, aux_per_unseen=3,
                             seed=seed)
        adj = build_index(store, ("observed", "auxiliary"))
        for u in sorted(store.unseen):
            got = discover_sp_patterns(adj, store.relations, u, walk_budget=None, max_half_len=3)
            mismatches += got != dfs_symmetric_paths(store, u, max_len=6)
            lengths |= {2 * len(p.half) for p in got}
    criterion("7 SP mining oracle", f"15 starts on 20-entity graphs, {mismatches} mismatches, "
                                    f"path lengths {sorted(lengths)}")
    assert mismatches == 0 and lengths <= {2, 4, 6} and len(lengths) >= 2


ABLATION_MODEL = EncoderConfig(dim=32, num_structure_layers=2, dropout=0.1)
ABLATION_TRAIN = dict(epochs=60, num_batches=10, num_negatives=8, learning_rate=0.01, eval_every=5)


def ablation_run(seed):
    kg = planted_kg(num_entities=300, num_clusters=4, rule_prob=0.95, seed=seed)
    return compare_ablations(kg.train, kg.valid, kg.test, kg.entities, kg.relations,
                             kg.rules(kg.train + kg.valid + kg.test), SplitConfig("subject", count=68, seed=seed),
                             ABLATION_MODEL, TrainConfig(seed=seed, **ABLATION_TRAIN),
                             ablations=("structure_only", "hard_rules", "full"), walk_budget=200, max_half_len=1)


@pytest.mark.slow
def test_8_directional_ablation(criterion):
    t0 = time.time()
    per_seed = {"structure_only": [], "hard_rules": [], "full": []}
    unseen = []
    for seed in range(3):
        out = ablation_run(seed)
        unseen.append(out["split"]["unseen_entities"] / 300)
        for abl, res in out["runs"].items():
            per_seed[abl].append(res["test"]["MRR"])
    mean = {k: float(np.mean(v)) for k, v in per_seed.items()}
    secs = time.time() - t0
    detail = ", ".join(f"{k} {mean[k]:.4f} {[round(x, 4) for x in v]}" for k, v in per_seed.items())
    criterion("8 directional ablation", f"mean test MRR: {detail}; unseen {np.mean(unseen):.0%}; {secs:.0f}s")
    assert mean["full"] > mean["structure_only"]
    assert mean["hard_rules"] >= mean["structure_only"]
    assert secs < 15 * 60


def test_9_overfit_smoke(criterion):
    cfg = EncoderConfig(dim=32, num_structure_layers=1, dropout=0.0, decoder="complex", ablation="structure_only")
    tc = TrainConfig(epochs=200, num_batches=1, num_negatives=4, learning_rate=0.03, l2=0.0, eval_every=0)
    trainer = Trainer(ring_store(), cfg, tc)
    losses = trainer.fit()[1].losses()
    reached = next((i + 1 for i, l in enumerate(losses) if l < 0.05), None)

    frozen = micro_trainer(learning_rate=0.0, epochs=3)
    before = {k: v.tobytes() for k, v in frozen.model.state_dict().items()}
    frozen.fit()
    identical = before == {k: v.tobytes() for k, v in frozen.model.state_dict().items()}
    criterion("9 overfit smoke", f"loss < 0.05 at epoch {reached}, lr=0 parameters identical={identical}")
    assert reached is not None and reached <= 200 and identical


def test_10_checkpoint_round_trip(criterion, tmp_path):
    tr = micro_trainer(epochs=3, learning_rate=0.01)
    model, _ = tr.fit()
    before, _, _ = evaluate_link_prediction(model, tr.store, tr.store.test)
    model.save(tmp_path / "m.ckpt", {"graph_virtual": [list(t) for t in tr.vn_triples]})
    _, meta = ad.load_tensors(tmp_path / "m.ckpt")
    graph = EncoderGraph.from_store(tr.store, [Triple(*t) for t in meta["graph_virtual"]])
    back, _ = VNModel.load(tmp_path / "m.ckpt", tr.store.relations, graph)
    after, _, _ = evaluate_link_prediction(back, tr.store, tr.store.test)
    same = before.to_dict(with_ranks=True) == after.to_dict(with_ranks=True)
    criterion("10 checkpoint round trip", f"MRR {before.mrr!r} vs {after.mrr!r}, identical={same}")
    assert same


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))
