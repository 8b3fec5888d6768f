"""Glue between the stages: split -> rules -> virtual neighbors -> train -> evaluate."""

from __future__ import annotations

import time

from .evaluate import evaluate_link_prediction
from .kg import TripleStore, build_index, neighbor_ratio_stats
from .model import ABLATION_TITLES, EncoderConfig
from .rules import (LogicRule, SpRule, VirtualNeighbors, generate_virtual_neighbors, ground_logic,
                    ground_sp, mine_sp_rules)
from .train import TrainConfig, Trainer


def build_virtual_neighbors(store: TripleStore, logic_rules: list[LogicRule],
                            sp_rules: list[SpRule] | None = None, mine_sp=True, walk_budget=1000,
                            max_half_len=3, seed=0, keep_all=False):
    """Ground logic and SP rules over O ∪ AUX and collect the VN table.

    When ``sp_rules`` is None and ``mine_sp`` is set, SP rules are mined from
    walks started at every unseen entity. Use ``keep_all`` when the table
    feeds several ablations: the trainer then picks the best grounding among
    the rule kinds each ablation allows.
    """
    adj = build_index(store, ("observed", "auxiliary"))
    t0 = time.time()
    if sp_rules is None:
        sp_rules = mine_sp_rules(store, adj, walk_budget, max_half_len, seed=seed) if mine_sp else []
    groundings = ground_logic(logic_rules, store)
    n_logic = len(groundings)
    for rule in sp_rules:
        groundings.extend(ground_sp(rule, store, adj))
    vn = generate_virtual_neighbors(groundings, store.known(), keep_all=keep_all)
    info = {"logic_rules": len(logic_rules), "sp_rules": len(sp_rules), "logic_groundings": n_logic,
            "sp_groundings": len(groundings) - n_logic, "virtual_triples": len(vn.triples),
            "seconds": time.time() - t0}
    return vn, sp_rules, info


def vn_ratio_summary(store: TripleStore, vn: VirtualNeighbors) -> dict:
    before = neighbor_ratio_stats(store, include_virtual=False)
    saved = set(store.virtual)
    store.virtual = set()
    store.add_virtual(vn.triples)
    after = neighbor_ratio_stats(store, include_virtual=True)
    store.virtual = saved
    return {"avg_ratio_unseen_before": before[0], "avg_ratio_observed_before": before[1],
            "avg_ratio_unseen_after": after[0], "avg_ratio_observed_after": after[1]}


def run_experiment(store: TripleStore, vn: VirtualNeighbors | None, model_config: EncoderConfig,
                   train_config: TrainConfig, filter_sets=None) -> dict:
    trainer = Trainer(store, model_config, train_config, vn)
    model, history = trainer.fit()
    report, records, skipped = evaluate_link_prediction(model, store, store.test, filter_sets)
    return {
        "ablation": model_config.ablation,
        "ablation_title": ABLATION_TITLES[model_config.ablation],
        "test": report.to_dict(),
        "test_skipped": skipped,
        "virtual_triples_used": len(trainer.vn_triples),
        "history": history.epochs,
        "best_epoch": history.best_epoch,
        "wall_time": history.wall_time,
        "model": model,
        "trainer": trainer,
        "records": records,
    }


def compare_ablations(train, valid, test, entities, relations, logic_rules, split_config,
                      model_config: EncoderConfig, train_config: TrainConfig,
                      ablations=("structure_only", "hard_rules", "full"), walk_budget=200, max_half_len=1) -> dict:
    """Split once, ground once (keeping every grounding), then train and test each ablation.

    Returns ``{"split": summary, "virtual_neighbors": info, "runs": {ablation: result}}`` where
    each result drops the live model and trainer objects.
    """
    from dataclasses import replace

    from .split import make_split

    store, summary = make_split(train, valid, test, split_config, entities, relations)
    mine = any(a in ("logic_plus_sp", "full") for a in ablations)
    vn, _, info = build_virtual_neighbors(store, logic_rules, mine_sp=mine, walk_budget=walk_budget,
                                          max_half_len=max_half_len, seed=split_config.seed, keep_all=True)
    runs = {}
    for abl in ablations:
        res = run_experiment(store, vn, replace(model_config, ablation=abl), train_config)
        for k in ("model", "trainer", "records"):
            res.pop(k)
        runs[abl] = res
    return {"split": summary, "virtual_neighbors": info, "runs": runs}
