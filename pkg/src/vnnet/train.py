"""Iterative training over hard-labeled triples and soft-labeled virtual triples."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .evaluate import evaluate_link_prediction
from .kg import Triple, TripleStore
from .model import EncoderConfig, EncoderGraph, VNModel
from .rules import VirtualNeighbors
from .softlabel import solve_soft_labels

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100            # N: each epoch runs num_batches minibatches
    num_batches: int = 100
    num_negatives: int = 64
    learning_rate: float = 0.002
    l2: float = 0.001
    penalty_c: float = 0.01
    clip_norm: float = 5.0
    neg_retry_cap: int = 100
    seed: int = 0
    eval_every: int = 1          # 0 disables validation during training
    max_valid: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("epochs", "num_batches", "num_negatives"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate < 0 or self.l2 < 0 or self.penalty_c < 0:
            raise ValueError("learning_rate, l2 and penalty_c must be nonnegative")

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------ negatives

def sample_negatives(positive: Triple, k: int, entities: np.ndarray, known: set,
                     rng: np.random.Generator, retry_cap=100) -> list[Triple]:
    """Corrupt head or tail (chosen uniformly) with uniformly drawn entities.

    A corruption that hits a known triple is redrawn up to ``retry_cap``
    times and then accepted as is.
    """
    h, r, t = positive
    out = []
    for _ in range(k):
        for _attempt in range(retry_cap + 1):
            e = int(entities[rng.integers(len(entities))])
            neg = Triple(e, r, t) if rng.random() < 0.5 else Triple(h, r, e)
            if neg not in known:
                break
        out.append(neg)
    return out


# ----------------------------------------------------------------- loss

def cross_entropy(p, y):
    """Elementwise ``-y log p - (1-y) log(1-p)`` on tensors."""
    return -(y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p))


def clipped_prob(raw: Tensor) -> Tensor:
    return ad.clip(ad.logistic(raw), PROB_EPS, 1.0 - PROB_EPS)


def global_loss(hard_probs: Tensor, hard_labels, soft_probs: Tensor | None = None, soft_labels=None,
                l2_term: Tensor | None = None) -> Tensor:
    """Mean hard cross entropy + mean soft cross entropy (+ optional L2 term).

    An empty soft batch contributes nothing.
    """
    loss = ad.mean(cross_entropy(hard_probs, Tensor(np.asarray(hard_labels, dtype=np.float64))))
    if soft_probs is not None and soft_probs.shape[0] > 0:
        loss = loss + ad.mean(cross_entropy(soft_probs, Tensor(np.asarray(soft_labels, dtype=np.float64))))
    if l2_term is not None:
        loss = loss + l2_term
    return loss


class Adam:
    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p = self.params[k]
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# ---------------------------------------------------------------- trainer

@dataclass
class History:
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    best_valid_mrr: float | None = None
    wall_time: float = 0.0

    def losses(self):
        return [e["loss"] for e in self.epochs]


def _vn_bucket(tr: Triple, unseen, num_batches: int) -> int:
    u = tr.head if tr.head in unseen else tr.tail
    return (u * 2654435761) % (2 ** 32) % num_batches


class Trainer:
    """Runs the minibatch loop: solve soft labels, encode, decode, step.

    ``vn`` holds the virtual triples with their groundings; which of them
    are used follows the model config's ablation. Each triple keeps its
    highest-priority grounding among the allowed rule kinds, so a table
    built with ``keep_all`` serves every ablation. ``all_groundings``
    keeps every allowed grounding instead.
    """

    def __init__(self, store: TripleStore, model_config: EncoderConfig, config: TrainConfig,
                 vn: VirtualNeighbors | None = None, hard_positives: Sequence[Triple] | None = None,
                 all_groundings=False):
        self.store = store
        self.config = config
        self.model_config = model_config
        kinds = model_config.rule_kinds
        self.vn_triples = []
        self.groundings = {}
        if vn is not None and kinds:
            for tr in vn.triples:
                gs = [g for g in vn.groundings[tr] if g.kind in kinds]
                if gs:
                    self.vn_triples.append(tr)
                    self.groundings[tr] = gs if all_groundings else gs[:1]
        graph = EncoderGraph.from_store(store, self.vn_triples)
        self.model = VNModel(model_config, store.num_entities, store.relations, graph, seed=config.seed)
        self.positives = sorted(hard_positives if hard_positives is not None else store.observed)
        self.known = store.known()
        self.entity_pool = np.asarray(store.observed_entities, dtype=np.int64)
        self.rng = np.random.default_rng(config.seed + 1)
        self.params = self.model.trainable()
        self.optimizer = Adam(self.params, config.learning_rate, config.beta1, config.beta2,
                              config.adam_eps)
        nb = config.num_batches
        self.vn_batches = [[] for _ in range(nb)]
        for tr in self.vn_triples:
            self.vn_batches[_vn_bucket(tr, store.unseen, nb)].append(tr)
        self.history = History()
        self.soft_label_log = []

    # one minibatch ------------------------------------------------------
    def soft_labels(self, vn_batch: Sequence[Triple]) -> np.ndarray:
        """Soft labels from a no-grad snapshot of the current parameters."""
        if not vn_batch:
            return np.zeros(0)
        if not self.model_config.soft_labels:
            return np.ones(len(vn_batch))
        needed = list(vn_batch)
        for tr in vn_batch:
            for g in self.groundings[tr]:
                needed.extend(g.premises)
        uniq = sorted(set(needed))
        probs = self.model.probabilities(np.asarray(uniq))
        scores = dict(zip(uniq, probs.tolist()))
        s = solve_soft_labels(vn_batch, self.groundings, scores, self.config.penalty_c)
        return np.array([s[tr] for tr in vn_batch])

    def batch_loss(self, hard: np.ndarray, labels: np.ndarray, vn_batch, soft: np.ndarray,
                   train=True) -> Tensor:
        m = self.model
        hl = m.structure_forward(train=train, rng=self.rng)
        all_tr = hard if not len(vn_batch) else np.concatenate([hard, np.asarray(vn_batch)])
        probs = clipped_prob(m.raw_scores(hl, all_tr))
        nh = len(hard)
        hard_p = ad.gather_rows(probs, np.arange(nh))
        soft_p = ad.gather_rows(probs, np.arange(nh, len(all_tr))) if len(vn_batch) else None
        l2 = None
        if self.config.l2 > 0:
            ents = np.unique(np.concatenate([all_tr[:, 0], all_tr[:, 2]]))
            rows = ad.gather_rows(m.params["H0"], m.h0_index[ents])
            rel = ad.gather_rows(m.params["R"], np.unique(all_tr[:, 1]))
            l2 = ad.scale(ad.mean(ad.sum_(rows * rows, axis=1)) + ad.mean(ad.sum_(rel * rel, axis=1)),
                          self.config.l2)
        return global_loss(hard_p, labels, soft_p, soft, l2)

    def _hard_batch(self, positives):
        c = self.config
        rows, labels = [], []
        for p in positives:
            rows.append(p)
            labels.append(1.0)
            negs = sample_negatives(p, c.num_negatives, self.entity_pool, self.known, self.rng,
                                    c.neg_retry_cap)
            rows.extend(negs)
            labels.extend([0.0] * len(negs))
        return np.asarray(rows, dtype=np.int64).reshape(-1, 3), np.asarray(labels)

    def step(self, positives, vn_batch) -> float:
        hard, labels = self._hard_batch(positives)
        soft = self.soft_labels(vn_batch)
        if len(vn_batch):
            self.soft_label_log.append((list(vn_batch), soft.copy()))
        for p in self.params.values():
            p.grad = None
        with ad.Tape() as tape:
            loss = self.batch_loss(hard, labels, vn_batch, soft, train=True)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {self.optimizer.t + 1}")
        tape.backward(loss)
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        clip_by_global_norm(grads, self.config.clip_norm)
        self.optimizer.step(grads)
        return value

    # full loop ----------------------------------------------------------
    def validate(self) -> float | None:
        valid = sorted(self.store.validation)
        if not valid:
            return None
        if self.config.max_valid and len(valid) > self.config.max_valid:
            idx = np.random.default_rng(self.config.seed).choice(len(valid), self.config.max_valid,
                                                                 replace=False)
            valid = [valid[i] for i in sorted(idx)]
        report, _, _ = evaluate_link_prediction(self.model, self.store, valid)
        return report.mrr

    def fit(self, callback=None) -> tuple[VNModel, History]:
        c = self.config
        t0 = time.time()
        best_state = None
        positives = list(self.positives)
        for epoch in range(1, c.epochs + 1):
            order = self.rng.permutation(len(positives))
            chunks = np.array_split(order, c.num_batches)
            losses = []
            for b, chunk in enumerate(chunks):
                if len(chunk) == 0:
                    continue
                losses.append(self.step([positives[i] for i in chunk], self.vn_batches[b]))
            rec = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan")}
            if c.eval_every and epoch % c.eval_every == 0:
                mrr = self.validate()
                rec["valid_mrr"] = mrr
                if mrr is not None and (self.history.best_valid_mrr is None or mrr > self.history.best_valid_mrr):
                    self.history.best_valid_mrr = mrr
                    self.history.best_epoch = epoch
                    best_state = self.model.state_dict()
            self.history.epochs.append(rec)
            log.info("epoch %d loss %.5f %s", epoch, rec["loss"],
                     f"valid MRR {rec['valid_mrr']:.4f}" if rec.get("valid_mrr") is not None else "")
            if callback is not None:
                callback(epoch, rec, self)
        if best_state is not None:
            self.model.load_state_dict(best_state)
        self.history.wall_time = time.time() - t0
        return self.model, self.history

    def final_soft_labels(self) -> dict:
        """Soft labels solved once with the final parameters (no refinement)."""
        s = self.soft_labels(self.vn_triples)
        return dict(zip(self.vn_triples, s.tolist()))


def train(store: TripleStore, vn: VirtualNeighbors | None, model_config: EncoderConfig,
          config: TrainConfig, callback=None):
    trainer = Trainer(store, model_config, config, vn)
    model, history = trainer.fit(callback)
    return model, history, trainer
