"""Encoder (WGCN structure layers + query-aware attention) and decoders."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kg import RelationVocab, Triple, TripleStore

DECODERS = ("distmult", "transe", "complex")
ABLATIONS = ("structure_only", "hard_rules", "soft_logic_only", "logic_plus_sp", "full")
ABLATION_TITLES = {
    "structure_only": "Structure aware",
    "hard_rules": "Hard rules",
    "soft_logic_only": "Logic rules",
    "logic_plus_sp": "Logic and SP rules",
    "full": "VN network",
}
QUERY_PARAMS = ("u", "W_e", "W_q", "Z")


@dataclass
class EncoderConfig:
    dim: int = 200
    num_structure_layers: int = 3
    layer_dims: list | None = None  # d^(0..L); defaults to [dim] * (L + 1)
    dropout: float = 0.3
    decoder: str = "distmult"
    ablation: str = "full"
    unknown_row: str = "shared"  # "shared" trainable row or "zero"
    share_inverse_query: bool = False
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.decoder not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.unknown_row not in ("shared", "zero"):
            raise ValueError("unknown_row must be 'shared' or 'zero'")
        if self.layer_dims is None:
            self.layer_dims = [self.dim] * (self.num_structure_layers + 1)
        if len(self.layer_dims) != self.num_structure_layers + 1:
            raise ValueError("layer_dims needs num_structure_layers + 1 entries")
        self.layer_dims = [int(d) for d in self.layer_dims]
        if self.decoder == "complex" and self.out_dim % 2:
            raise ValueError("ComplEx needs an even embedding dimension")

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def use_query_layer(self) -> bool:
        return self.ablation == "full"

    @property
    def rule_kinds(self) -> tuple[str, ...]:
        return {"structure_only": (), "hard_rules": ("logic",), "soft_logic_only": ("logic",),
                "logic_plus_sp": ("logic", "sp"), "full": ("logic", "sp")}[self.ablation]

    @property
    def soft_labels(self) -> bool:
        return self.ablation not in ("structure_only", "hard_rules")

    def to_dict(self):
        return asdict(self)


class EncoderGraph:
    """Message lists ``src --rel--> dst`` feeding each entity's aggregation.

    Observed entities aggregate over O; unseen entities aggregate over the
    AUX and VN triples incident to them. Messages are sorted by ``dst`` so
    that each entity's neighbors form one contiguous block.
    """

    def __init__(self, num_entities: int, relations: RelationVocab, observed: Iterable[Triple],
                 auxiliary: Iterable[Triple] = (), virtual: Iterable[Triple] = (), unseen=frozenset()):
        dst, rel, src = [], [], []
        for h, r, t in sorted(set(observed)):
            dst += [h, t]
            rel += [r, relations.inverse(r)]
            src += [t, h]
        for h, r, t in sorted(set(auxiliary) | set(virtual)):
            if h in unseen:
                dst.append(h); rel.append(r); src.append(t)
            if t in unseen:
                dst.append(t); rel.append(relations.inverse(r)); src.append(h)
        dst, rel, src = (np.asarray(x, dtype=np.int64) for x in (dst, rel, src))
        order = np.lexsort((src, rel, dst))
        self.dst, self.rel, self.src = dst[order], rel[order], src[order]
        self.num_entities = num_entities
        counts = np.bincount(self.dst, minlength=num_entities)
        self.indptr = np.concatenate([[0], np.cumsum(counts)])
        self.unseen = frozenset(unseen)

    @classmethod
    def from_store(cls, store: TripleStore, virtual: Iterable[Triple] = ()):
        return cls(store.num_entities, store.relations, store.observed, store.auxiliary,
                   virtual, store.unseen)

    def degree(self, e) -> np.ndarray:
        e = np.asarray(e)
        return self.indptr[e + 1] - self.indptr[e]

    def neighbors(self, e: int) -> list[tuple[int, int]]:
        s, t = self.indptr[e], self.indptr[e + 1]
        return list(zip(self.rel[s:t].tolist(), self.src[s:t].tolist()))

    def edges_of(self, ents: np.ndarray):
        """Concatenated message positions of each entity, plus owning row."""
        ents = np.asarray(ents, dtype=np.int64)
        starts, counts = self.indptr[ents], self.degree(ents)
        owner = np.repeat(np.arange(len(ents)), counts)
        if owner.size == 0:
            return owner, owner
        offsets = np.arange(owner.size) - np.repeat(np.cumsum(counts) - counts, counts)
        return starts[owner] + offsets, owner


class ParamDict(dict):
    """Parameter table that records which entries were read."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.touched: set[str] = set()

    def __getitem__(self, key):
        self.touched.add(key)
        return super().__getitem__(key)


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


def _glorot(rng, fan_in, fan_out, shape=None):
    return _uniform(rng, shape or (fan_in, fan_out), np.sqrt(6.0 / (fan_in + fan_out)))


def decode_scores(kind: str, eh: Tensor, rel: Tensor, et: Tensor) -> Tensor:
    """Raw decoder score per row of matching ``(B, d)`` tensors."""
    if not (eh.shape == rel.shape == et.shape):
        raise ad.ShapeError(f"decode: mismatched shapes {eh.shape}, {rel.shape}, {et.shape}")
    if kind == "distmult":
        return ad.sum_(eh * rel * et, axis=-1)
    if kind == "transe":
        return -ad.sum_(ad.abs_(eh + rel - et), axis=-1)
    if kind == "complex":
        # first half of each vector is the real part, second half the imaginary part
        d = eh.shape[-1] // 2
        re = lambda x: _take_half(x, 0, d)
        im = lambda x: _take_half(x, 1, d)
        hr, hi, rr, ri, tr, ti = re(eh), im(eh), re(rel), im(rel), re(et), im(et)
        return ad.sum_(hr * rr * tr + hr * ri * ti + hi * rr * ti - hi * ri * tr, axis=-1)
    raise ValueError(f"unknown decoder {kind!r}")


def _take_half(x: Tensor, which: int, d: int) -> Tensor:
    # columns [which*d, (which+1)*d) via a transposed row gather
    cols = np.arange(which * d, (which + 1) * d)
    if x.ndim == 1:
        return ad.gather_rows(x, cols)
    n = x.shape[0]
    flat = ad.reshape(x, (-1,))
    idx = (np.arange(n)[:, None] * x.shape[1] + cols[None, :]).reshape(-1)
    return ad.reshape(ad.gather_rows(flat, idx), (n, d))


def decode(kind: str, e_i, r_k, e_j) -> tuple[float, float]:
    """Score one triple from plain vectors; returns ``(raw, probability)``."""
    e_i, r_k, e_j = (np.asarray(x, dtype=np.float64) for x in (e_i, r_k, e_j))
    if not (e_i.shape == r_k.shape == e_j.shape) or e_i.ndim != 1:
        raise ad.ShapeError(f"decode: mismatched shapes {e_i.shape}, {r_k.shape}, {e_j.shape}")
    raw = float(decode_scores(kind, Tensor(e_i[None]), Tensor(r_k[None]), Tensor(e_j[None])).data[0])
    return raw, float(ad.logistic(Tensor(raw)).data)


class VNModel:
    def __init__(self, config: EncoderConfig, num_entities: int, relations: RelationVocab,
                 graph: EncoderGraph, seed=0):
        self.config = config
        self.num_entities = num_entities
        self.relations = relations
        self.graph = graph
        self.params = ParamDict()
        self._init_params(np.random.default_rng(seed))
        self.set_unseen(graph.unseen)

    # -- setup ------------------------------------------------------------
    def _init_params(self, rng):
        c = self.config
        dims = c.layer_dims
        n_ext = self.relations.num_extended
        d0 = dims[0]
        p = self.params
        p["H0"] = Tensor(_uniform(rng, (self.num_entities + 1, d0), 6.0 / np.sqrt(d0)), True, "H0")
        for l in range(1, len(dims)):
            p[f"W{l}"] = Tensor(_glorot(rng, dims[l - 1], dims[l]), True, f"W{l}")
            p[f"alpha{l}"] = Tensor(np.ones(n_ext), True, f"alpha{l}")
        d = c.out_dim
        p["u"] = Tensor(_uniform(rng, (3 * d,), np.sqrt(6.0 / (3 * d + 1))), True, "u")
        p["W_e"] = Tensor(_glorot(rng, d, d), True, "W_e")
        p["W_q"] = Tensor(_glorot(rng, d, d), True, "W_q")
        p["Z"] = Tensor(_uniform(rng, (n_ext, d), 6.0 / np.sqrt(d)), True, "Z")
        p["R"] = Tensor(_uniform(rng, (self.relations.num_base, d), 6.0 / np.sqrt(d)), True, "R")
        p.touched.clear()

    def set_unseen(self, unseen):
        self.unseen = frozenset(unseen)
        idx = np.arange(self.num_entities)
        mask = np.ones(self.num_entities)
        for e in self.unseen:
            idx[e] = self.num_entities
            mask[e] = 0.0
        self.h0_index = idx
        self.h0_mask = mask[:, None]

    def set_graph(self, graph: EncoderGraph):
        self.graph = graph
        self.set_unseen(graph.unseen)

    def trainable(self) -> dict:
        """Parameters the active configuration actually uses."""
        keys = [k for k in dict.keys(self.params)
                if self.config.use_query_layer or k not in QUERY_PARAMS]
        return {k: dict.__getitem__(self.params, k) for k in keys}

    # -- encoder ----------------------------------------------------------
    def structure_forward(self, train=False, rng=None) -> Tensor:
        """H^(L) for every entity: stacked WGCN layers over the message graph."""
        c, g, p = self.config, self.graph, self.params
        n = self.num_entities
        h = ad.gather_rows(p["H0"], self.h0_index)
        if c.unknown_row == "zero" and self.unseen:
            h = h * Tensor(self.h0_mask)
        for l in range(1, c.num_structure_layers + 1):
            if len(g.src):
                w = ad.reshape(ad.gather_rows(p[f"alpha{l}"], g.rel), (-1, 1))
                agg = ad.scatter_add_rows(ad.gather_rows(h, g.src) * w, g.dst, n)
                h = ad.tanh(ad.matmul(agg + h, p[f"W{l}"]))
            else:
                h = ad.tanh(ad.matmul(h, p[f"W{l}"]))
            h = ad.dropout(h, c.dropout, train, rng)
        return h

    def query_forward(self, hl: Tensor, ents, queries) -> Tensor:
        """Attention-pooled embedding of each ``ents[k]`` given query relation ``queries[k]``.

        Entities without neighbors fall back to their own ``h^(L)`` row.
        """
        p, g = self.params, self.graph
        ents = np.asarray(ents, dtype=np.int64)
        queries = np.asarray(queries, dtype=np.int64)
        if self.config.share_inverse_query:
            queries = np.where(queries >= self.relations.num_base, queries - self.relations.num_base, queries)
        d = hl.shape[1]
        u3 = ad.reshape(p["u"], (3, d))
        we_h = ad.matmul(hl, p["W_e"])
        s_self = ad.matmul(we_h, ad.gather_rows(u3, 0))
        s_nbr = ad.matmul(we_h, ad.gather_rows(u3, 2))
        s_q = ad.matmul(ad.matmul(p["Z"], p["W_q"]), ad.gather_rows(u3, 1))

        pos, owner = g.edges_of(ents)
        num = len(ents)
        nbr = g.src[pos]
        out = None
        if len(pos):
            beta = ad.leaky_relu(ad.gather_rows(s_self, ents[owner]) + ad.gather_rows(s_q, queries[owner])
                                 + ad.gather_rows(s_nbr, nbr), self.config.leaky_slope)
            att = ad.segment_softmax(beta, owner, num)
            out = ad.scatter_add_rows(ad.gather_rows(hl, nbr) * ad.reshape(att, (-1, 1)), owner, num)
        iso = (g.degree(ents) == 0).astype(np.float64)[:, None]
        if iso.any():
            fallback = ad.gather_rows(hl, ents) * Tensor(iso)
            out = fallback if out is None else out + fallback
        return out

    def attention_weights(self, hl: Tensor, e: int, q: int) -> np.ndarray:
        """Normalized attention over ``e``'s message list (inference helper)."""
        p, g = self.params, self.graph
        d = hl.shape[1]
        u = p["u"].data.reshape(3, d)
        we_h = hl.data @ p["W_e"].data
        s, t = g.indptr[e], g.indptr[e + 1]
        nbr = g.src[s:t]
        beta = we_h[e] @ u[0] + (p["Z"].data[q] @ p["W_q"].data) @ u[1] + we_h[nbr] @ u[2]
        beta = np.where(beta > 0, beta, self.config.leaky_slope * beta)
        w = np.exp(beta - beta.max())
        return w / w.sum()

    def embed(self, hl: Tensor, ents, queries) -> Tensor:
        if self.config.use_query_layer:
            return self.query_forward(hl, ents, queries)
        return ad.gather_rows(hl, np.asarray(ents, dtype=np.int64))

    def embed_pairs(self, hl: Tensor, ents, queries) -> Tensor:
        """Like :meth:`embed` but evaluates each distinct (entity, query) pair once."""
        ents = np.asarray(ents, dtype=np.int64)
        if not self.config.use_query_layer:
            return ad.gather_rows(hl, ents)
        queries = np.asarray(queries, dtype=np.int64)
        keys = ents * self.relations.num_extended + queries
        uniq, inv = np.unique(keys, return_inverse=True)
        e_u, q_u = uniq // self.relations.num_extended, uniq % self.relations.num_extended
        return ad.gather_rows(self.query_forward(hl, e_u, q_u), inv)

    # -- decoder ----------------------------------------------------------
    def raw_scores(self, hl: Tensor, triples) -> Tensor:
        """Decoder scores for ``(B, 3)`` integer triples.

        The head is encoded under query ``r`` and the tail under ``inv(r)``.
        """
        tr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        h, r, t = tr[:, 0], tr[:, 1], tr[:, 2]
        nb = self.relations.num_base
        both = self.embed_pairs(hl, np.concatenate([h, t]), np.concatenate([r, r + nb]))
        b = len(tr)
        eh = ad.gather_rows(both, np.arange(b))
        et = ad.gather_rows(both, np.arange(b, 2 * b))
        rel = ad.gather_rows(self.params["R"], r)
        return decode_scores(self.config.decoder, eh, rel, et)

    def probabilities(self, triples, hl: Tensor | None = None) -> np.ndarray:
        """Inference-mode truth values ``logistic(raw)``."""
        if hl is None:
            hl = self.structure_forward(train=False)
        if len(triples) == 0:
            return np.zeros(0)
        return ad.logistic(self.raw_scores(hl, triples)).data.copy()

    def encode_unseen(self, e: int, q: int, hl: Tensor | None = None) -> np.ndarray:
        """Embedding of an unseen entity under query ``q`` from its AUX ∪ VN neighborhood."""
        if self.graph.degree(e) == 0:
            raise ValueError(f"unseen entity {e} has no auxiliary or virtual edges")
        if hl is None:
            hl = self.structure_forward(train=False)
        return self.embed(hl, [e], [q]).data[0].copy()

    # -- persistence ------------------------------------------------------
    def state_dict(self) -> dict:
        return {k: dict.__getitem__(self.params, k).data.copy() for k in dict.keys(self.params)}

    def load_state_dict(self, state: dict):
        for k, v in state.items():
            t = dict.__getitem__(self.params, k)
            if t.data.shape != np.shape(v):
                raise ad.ShapeError(f"checkpoint tensor {k}: shape {np.shape(v)} != {t.data.shape}")
            t.data = np.array(v, dtype=np.float64, copy=True)

    def save(self, path, extra=None):
        meta = {"config": self.config.to_dict(), "num_entities": self.num_entities,
                "num_relations": self.relations.num_base}
        if extra:
            meta.update(extra)
        ad.save_tensors(path, {k: dict.__getitem__(self.params, k) for k in dict.keys(self.params)}, meta)

    @classmethod
    def load(cls, path, relations: RelationVocab, graph: EncoderGraph):
        arrays, meta = ad.load_tensors(path)
        if meta["num_relations"] != relations.num_base:
            raise ValueError("checkpoint relation count does not match the vocabulary")
        model = cls(EncoderConfig(**meta["config"]), meta["num_entities"], relations, graph)
        model.load_state_dict(arrays)
        return model, meta
