"""Command-line entry point: ``vnnet <subcommand> ...``.

Every subcommand writes a JSON report (config echo, seed, timings, outputs).
Settings come from flags, then the matching section of ``--config``, then
built-in defaults. Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .evaluate import (classify, corrupt_negatives, evaluate_link_prediction, fit_thresholds,
                       known_triples)
from .kg import (DataError, RelationVocab, Triple, Vocab, build_index, load_labeled_triples, load_store,
                 load_triples, neighbor_ratio_stats, save_store)
from .model import ABLATION_TITLES, ABLATIONS, DECODERS, EncoderConfig, EncoderGraph, VNModel
from .pipeline import build_virtual_neighbors, vn_ratio_summary
from .rules import (generate_virtual_neighbors, ground_logic, ground_sp, mine_sp_rules, parse_rules,
                    parse_sp_rules, read_groundings, write_groundings, write_sp_rules, write_virtual)
from .split import SplitConfig, make_split
from .train import TrainConfig, Trainer, TrainingDiverged

log = logging.getLogger("vnnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
FILTER_SETS = ("observed", "auxiliary", "validation", "test")
FILE_OUTPUTS = ("mine-sp", "infer-vn")  # subcommands whose --out is a file


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ------------------------------------------------------------------ helpers

def resolve_seed(seed):
    if seed is not None:
        return int(seed)
    env = os.environ.get("VN_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"VN_SEED must be an integer, got {env!r}") from None


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    return p


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    return v


def write_report(path, report: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True, allow_nan=True))
    return path


def model_config(args) -> EncoderConfig:
    return EncoderConfig(dim=args.dim, num_structure_layers=args.layers, dropout=args.dropout,
                         decoder=args.decoder, ablation=args.ablation)


def train_config(args, seed) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, num_batches=args.batches, num_negatives=args.negatives,
                       learning_rate=args.lr, l2=args.l2, penalty_c=args.penalty, seed=seed,
                       eval_every=args.eval_every, max_valid=args.max_valid)


def _load_vn(path, store):
    vn = read_groundings(_require(path))
    unknown = [t for t in vn.triples if not (0 <= t.head < store.num_entities and 0 <= t.tail < store.num_entities)]
    if unknown:
        raise DataError(f"{path}: grounding mentions entity ids outside the vocabulary")
    return vn


def _load_model(args, store):
    """Rebuild a trained model; its graph's virtual edges come from the checkpoint header."""
    from . import autodiff as ad
    _, meta = ad.load_tensors(_require(args.checkpoint))
    virtual = [Triple(*t) for t in meta.get("graph_virtual", [])]
    graph = EncoderGraph.from_store(store, virtual)
    model, meta = VNModel.load(args.checkpoint, store.relations, graph)
    return model, meta


def _triples_for(store, which):
    return sorted(store.test if which == "test" else store.validation)


# -------------------------------------------------------------- subcommands

def cmd_split(args, seed):
    entities, relations = Vocab(), RelationVocab()
    train = load_triples(_require(args.train), entities, relations)
    valid = load_triples(_require(args.valid), entities, relations)
    test = load_triples(_require(args.test), entities, relations)
    entities.freeze()
    relations.freeze()
    cfg = SplitConfig(args.strategy, fraction=args.fraction, count=args.count, seed=seed)
    store, summary = make_split(train, valid, test, cfg, entities, relations)
    out = save_store(store, args.out)
    (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True))
    return {"summary": summary, "outputs": {"directory": str(out), "summary": str(out / "summary.json")}}


def cmd_stats(args, seed):
    store = load_store(_require(args.data))
    unseen_ratio, observed_ratio = neighbor_ratio_stats(store, include_virtual=False)
    stats = {"entities": store.num_entities, "relations": store.relations.num_base,
             "observed": len(store.observed), "auxiliary": len(store.auxiliary),
             "validation": len(store.validation), "test": len(store.test),
             "unseen_entities": len(store.unseen),
             "avg_ratio_unseen": unseen_ratio, "avg_ratio_observed": observed_ratio}
    if args.groundings:
        stats.update(vn_ratio_summary(store, _load_vn(args.groundings, store)))
    print(json.dumps(_jsonable(stats), indent=2, sort_keys=True, allow_nan=True))
    return {"stats": stats}


def cmd_mine_sp(args, seed):
    store = load_store(_require(args.data))
    adj = build_index(store, ("observed", "auxiliary"))
    budget = None if args.walk_budget <= 0 else args.walk_budget
    rules = mine_sp_rules(store, adj, budget, args.max_half_len, args.threshold, args.min_support, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sp_rules(out, rules, store.relations)
    return {"sp_rules": len(rules), "outputs": {"sp_rules": str(out)}}


def cmd_ground(args, seed):
    store = load_store(_require(args.data))
    groundings = []
    if args.rules:
        groundings.extend(ground_logic(parse_rules(_require(args.rules), store.relations, args.threshold),
                                       store))
    n_logic = len(groundings)
    if args.sp_rules:
        adj = build_index(store, ("observed", "auxiliary"))
        for rule in parse_sp_rules(_require(args.sp_rules), store.relations, args.threshold):
            groundings.extend(ground_sp(rule, store, adj))
    vn = generate_virtual_neighbors(groundings, store.known(), keep_all=args.keep_all)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_groundings(out / "groundings.jsonl", vn)
    write_virtual(out / "virtual.tsv", vn, store.entities, store.relations)
    return {"logic_groundings": n_logic, "sp_groundings": len(groundings) - n_logic,
            "virtual_triples": len(vn.triples),
            "outputs": {"groundings": str(out / "groundings.jsonl"), "virtual": str(out / "virtual.tsv")}}


def _fit(store, vn, mcfg, tcfg, out: Path):
    trainer = Trainer(store, mcfg, tcfg, vn)
    model, history = trainer.fit()
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    model.save(ckpt, {"graph_virtual": [list(t) for t in trainer.vn_triples], "seed": tcfg.seed,
                      "train_config": tcfg.to_dict()})
    return trainer, model, history, ckpt


def cmd_train(args, seed):
    store = load_store(_require(args.data))
    vn = _load_vn(args.groundings, store) if args.groundings else None
    mcfg, tcfg = model_config(args), train_config(args, seed)
    trainer, model, history, ckpt = _fit(store, vn, mcfg, tcfg, Path(args.out))
    return {"ablation": mcfg.ablation, "ablation_title": ABLATION_TITLES[mcfg.ablation],
            "model_config": mcfg.to_dict(), "train_config": tcfg.to_dict(),
            "epochs": history.epochs, "best_epoch": history.best_epoch,
            "best_valid_mrr": history.best_valid_mrr, "wall_time": history.wall_time,
            "virtual_triples_used": len(trainer.vn_triples), "outputs": {"checkpoint": str(ckpt)}}


def cmd_infer_vn(args, seed):
    store = load_store(_require(args.data))
    vn = _load_vn(args.groundings, store)
    model, meta = _load_model(args, store)
    tcfg = TrainConfig(penalty_c=args.penalty, seed=seed)
    trainer = Trainer(store, model.config, tcfg, vn)
    trainer.model = model
    labels = trainer.final_soft_labels()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for tr in trainer.vn_triples:
            h, r, t = tr
            f.write(f"{store.entities.name(h)}\t{store.relations.name(r)}\t{store.entities.name(t)}"
                    f"\t{labels[tr]:.6f}\t{vn.grounding_id(tr)}\n")
    return {"virtual_triples": len(labels), "outputs": {"soft_labels": str(out)}}


def _write_ranks(path, records, store):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for (h, r, t), side, rank in records:
            f.write(f"{store.entities.name(h)}\t{store.relations.name(r)}\t{store.entities.name(t)}"
                    f"\t{side}\t{rank:g}\n")


def cmd_eval_lp(args, seed):
    store = load_store(_require(args.data))
    model, meta = _load_model(args, store)
    report, records, skipped = evaluate_link_prediction(model, store, _triples_for(store, args.split),
                                                        args.filter_sets)
    outputs = {}
    if args.ranks_out:
        _write_ranks(args.ranks_out, records, store)
        outputs["ranks"] = str(args.ranks_out)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return {"metrics": report.to_dict(), "skipped_both_unseen": skipped,
            "filter_sets": list(args.filter_sets), "ablation": model.config.ablation,
            "ablation_title": ABLATION_TITLES[model.config.ablation], "outputs": outputs}


def _labeled(path, store, fallback, known, seed):
    """Labeled triples from ``path``, or ``fallback`` positives plus 1:1 corrupted negatives."""
    if path:
        rows = load_labeled_triples(_require(path), store.entities, store.relations)
        return [t for t, _ in rows], np.array([y for _, y in rows])
    neg = corrupt_negatives(fallback, store.observed_entities, known, seed=seed)
    return list(fallback) + neg, np.array([1] * len(fallback) + [0] * len(neg))


def cmd_eval_tc(args, seed):
    store = load_store(_require(args.data))
    model, meta = _load_model(args, store)
    known = known_triples(store, FILTER_SETS)
    vt, vy = _labeled(args.valid_labeled, store, sorted(store.validation), known, seed)
    tt, ty = _labeled(args.test_labeled, store, sorted(store.test), known, seed + 1)
    if not vt or not tt:
        raise DataError("triple classification needs nonempty validation and test sets")
    hl = model.structure_forward(train=False)
    vs = model.raw_scores(hl, np.asarray(vt)).data
    ts = model.raw_scores(hl, np.asarray(tt)).data
    thresholds = fit_thresholds(vs, vy, [t[1] for t in vt])
    acc = classify(ts, ty, [t[1] for t in tt], thresholds)
    print(json.dumps({"accuracy": acc}))
    return {"metrics": {"accuracy": acc, "valid_examples": len(vt), "test_examples": len(tt)},
            "thresholds": {store.relations.name(r): d for r, d in thresholds.per_relation.items()},
            "outputs": {}}


def cmd_run_all(args, seed):
    out = Path(args.out)
    timings = {}
    t = time.time()
    split_out = cmd_split(argparse.Namespace(**{**vars(args), "out": out / "data"}), seed)
    timings["split"] = time.time() - t
    store = load_store(out / "data")
    logic = parse_rules(_require(args.rules), store.relations, args.threshold) if args.rules else []
    t = time.time()
    budget = None if args.walk_budget <= 0 else args.walk_budget
    mine = args.ablation in ("logic_plus_sp", "full")
    vn, sp_rules, info = build_virtual_neighbors(store, logic, mine_sp=mine, walk_budget=budget,
                                                 max_half_len=args.max_half_len, seed=seed, keep_all=True)
    timings["rules"] = time.time() - t
    write_sp_rules(out / "sp_rules.txt", sp_rules, store.relations)
    write_groundings(out / "groundings.jsonl", vn)
    write_virtual(out / "virtual.tsv", vn, store.entities, store.relations)
    mcfg, tcfg = model_config(args), train_config(args, seed)
    t = time.time()
    trainer, model, history, ckpt = _fit(store, vn, mcfg, tcfg, out)
    timings["train"] = time.time() - t
    t = time.time()
    report, records, skipped = evaluate_link_prediction(model, store, sorted(store.test), args.filter_sets)
    timings["evaluate"] = time.time() - t
    _write_ranks(out / "ranks.tsv", records, store)
    print(f"{ABLATION_TITLES[mcfg.ablation]}: " + json.dumps(report.to_dict(), sort_keys=True))
    return {"ablation": mcfg.ablation, "ablation_title": ABLATION_TITLES[mcfg.ablation],
            "split": split_out["summary"], "virtual_neighbors": info,
            "neighbor_ratios": vn_ratio_summary(store, vn),
            "virtual_triples_used": len(trainer.vn_triples),
            "model_config": mcfg.to_dict(), "train_config": tcfg.to_dict(),
            "epochs": history.epochs, "best_epoch": history.best_epoch,
            "metrics": report.to_dict(), "skipped_both_unseen": skipped, "stage_seconds": timings,
            "outputs": {"checkpoint": str(ckpt), "ranks": str(out / "ranks.tsv"),
                        "groundings": str(out / "groundings.jsonl"), "data": str(out / "data")}}


# ------------------------------------------------------------------- parser

def _add_split_args(p):
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--strategy", choices=("subject", "object", "both"), default="subject")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--fraction", type=float, help="percent of test triples used to pick unseen entities")
    g.add_argument("--count", type=int, help="number of test triples used to pick unseen entities")


def _add_model_args(p):
    p.add_argument("--ablation", choices=ABLATIONS, default="full")
    p.add_argument("--dim", type=int, default=200)
    p.add_argument("--layers", type=int, default=3, help="number of structure layers")
    p.add_argument("--dropout", type=float, default=0.3)
    p.add_argument("--decoder", choices=DECODERS, default="distmult")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batches", type=int, default=100, help="minibatches per epoch")
    p.add_argument("--negatives", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--l2", type=float, default=0.001)
    p.add_argument("--penalty", type=float, default=0.01, help="soft-label penalty C")
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--max-valid", type=int, default=None)


def _add_mining_args(p):
    p.add_argument("--walk-budget", type=int, default=1000, help="walks per start and half length; <=0 is exhaustive")
    p.add_argument("--max-half-len", type=int, default=3, choices=(1, 2, 3))


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with one section per subcommand")
    common.add_argument("--seed", type=int, default=None, help="falls back to $VN_SEED, then 0")
    common.add_argument("--report", help="where to write the JSON report")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="vnnet", description="Virtual-neighbor KG embedding for unseen entities.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("split", parents=[common], help="build O/AUX/valid/test for unseen entities")
    _add_split_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("stats", parents=[common], help="partition counts and neighbor ratios")
    p.add_argument("--data", required=True)
    p.add_argument("--groundings")

    p = sub.add_parser("mine-sp", parents=[common], help="mine symmetric-path rules")
    p.add_argument("--data", required=True)
    _add_mining_args(p)
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--min-support", type=int, default=5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ground", parents=[common], help="ground rules into virtual neighbors")
    p.add_argument("--data", required=True)
    p.add_argument("--rules")
    p.add_argument("--sp-rules")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--keep-all", action="store_true", help="keep every grounding per virtual triple")
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer-vn", parents=[common], help="dump soft labels of virtual triples")
    p.add_argument("--data", required=True)
    p.add_argument("--groundings", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--penalty", type=float, default=0.01)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--groundings")
    _add_model_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-lp", parents=[common], help="filtered link prediction")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "valid"), default="test")
    p.add_argument("--filter-sets", nargs="+", choices=FILTER_SETS, default=list(FILTER_SETS))
    p.add_argument("--ranks-out", help="TSV dump of per-query ranks")

    p = sub.add_parser("eval-tc", parents=[common], help="triple classification accuracy")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--valid-labeled", help="head, relation, tail, label TSV for threshold fitting")
    p.add_argument("--test-labeled")

    p = sub.add_parser("run-all", parents=[common], help="split, rules, train and evaluate end to end")
    _add_split_args(p)
    p.add_argument("--rules")
    p.add_argument("--threshold", type=float, default=0.8)
    _add_mining_args(p)
    _add_model_args(p)
    p.add_argument("--filter-sets", nargs="+", choices=FILTER_SETS, default=list(FILTER_SETS))
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {"split": cmd_split, "stats": cmd_stats, "mine-sp": cmd_mine_sp, "ground": cmd_ground,
            "infer-vn": cmd_infer_vn, "train": cmd_train, "eval-lp": cmd_eval_lp,
            "eval-tc": cmd_eval_tc, "run-all": cmd_run_all}


def parse_args(argv):
    """Apply the subcommand's ``--config`` section as defaults, then parse; flags win."""
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config and command:
        cfg = json.loads(_require(known.config).read_text())
        section = cfg.get(command, {})
        if not isinstance(section, dict):
            raise UsageError(f"config section {command!r} must be an object")
        section = {k.replace("-", "_"): v for k, v in section.items()}
        sub = parser._subparsers._group_actions[0].choices[command]
        dests = {a.dest for a in sub._actions}
        unknown = sorted(k for k in section if k not in dests)
        if unknown:
            raise UsageError(f"unknown keys in config section {command!r}: {', '.join(unknown)}")
        sub.set_defaults(**section)
        for a in sub._actions:
            if a.dest in section:
                a.required = False
    return parser.parse_args(argv)


def _report_dir(args) -> Path:
    """Next to the outputs: inside ``--out`` when it is a directory, beside it when it is a file."""
    out = getattr(args, "out", None)
    if not out:
        return Path(".")
    return Path(out).parent if args.command in FILE_OUTPUTS else Path(out)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        seed = resolve_seed(args.seed)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, json.JSONDecodeError) as e:
        print(f"vnnet: cannot read config: {e}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    t0 = time.time()
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            result = COMMANDS[args.command](args, seed)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"vnnet: missing input file: {e.filename or e}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, KeyError, ValueError) as e:
        print(f"vnnet: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"vnnet: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    report = {"command": args.command, "argv": argv, "seed": seed,
              "config": {k: v for k, v in vars(args).items() if k not in ("command",)},
              "seconds": time.time() - t0, **result}
    path = args.report or _report_dir(args) / f"{args.command}_report.json"
    write_report(path, report)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
