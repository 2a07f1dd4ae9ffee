"""Entity encoders: attention aggregation + shared LSTM update, and plain lookup."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, ContractError, CoverageError, VocabLookupError
from .kgstore import KnowledgeGraph, NeighborEntry
from .params import ModelSpec
from .sampler import SubGraph


@dataclass
class EncoderConfig:
    hops: int = 2
    embed_dim: int = 64
    attention_hidden: int = 32
    use_attributes: bool = False
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.hops < 1:
            raise ConfigError("encoder.hops", "K must be >= 1")
        if self.embed_dim <= 0:
            raise ConfigError("encoder.dim", "must be positive")


class ParamView:
    """Pulled parameter rows, exposed as tensors on an optional tape.

    ``values`` maps group name to ``(rows, array)`` with ``rows`` sorted.
    With a tape, every group becomes one leaf so gradients come back keyed
    by ``(group, row)``.
    """

    def __init__(self, values: dict, tape: Optional[Tape] = None, singles: Sequence[str] = ()):
        self.tape = tape
        self._rows = {}
        self._tensors = {}
        for name, (rows, arr) in values.items():
            rows = np.asarray(rows, dtype=np.int64)
            if len(rows) > 1 and np.any(np.diff(rows) <= 0):
                order = np.argsort(rows)
                rows, arr = rows[order], arr[order]
            self._rows[name] = rows
            if name in singles:
                t = tape.param(name, arr[0]) if tape is not None else Tensor(arr[0])
            else:
                t = tape.table(name, rows, arr) if tape is not None else Tensor(arr)
            self._tensors[name] = t

    def __contains__(self, name):
        return name in self._tensors

    def single(self, name) -> Tensor:
        return self._tensors[name]

    def table(self, name) -> Tensor:
        return self._tensors[name]

    def local(self, name, ids) -> np.ndarray:
        rows = self._rows[name]
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.searchsorted(rows, ids)
        pos_c = np.minimum(pos, len(rows) - 1)
        if ids.size and (len(rows) == 0 or np.any(rows[pos_c] != ids)):
            missing = ids[(pos >= len(rows)) | (rows[pos_c] != ids)]
            raise ContractError(f"{name}: rows {missing[:5].tolist()} were not pulled")
        return pos_c

    def rows(self, name, ids) -> Tensor:
        """Gather parameter rows ``ids`` (global row ids, any shape)."""
        return ad.gather_rows(self._tensors[name], self.local(name, ids))


SINGLE_GROUPS = ("attn_W", "attn_u", "lstm_W", "lstm_b", "attr_proj")


@dataclass
class EncodedBatch:
    entities: np.ndarray
    embeddings: Tensor
    tape: Optional[Tape] = None

    def positions(self, ids) -> np.ndarray:
        index = {int(e): i for i, e in enumerate(self.entities.tolist())}
        flat = [index[e] for e in np.ravel(ids).tolist()]
        return np.asarray(flat, dtype=np.int64).reshape(np.shape(ids))


def base_embedding(entities, view: ParamView, spec: ModelSpec, g: KnowledgeGraph,
                   strict: Optional[bool] = None) -> Tensor:
    """Layer-0 embeddings for ``entities``.

    With attributes enabled the embedding is the projected attribute row for
    every entity, seen or not. Otherwise the free embedding row is used;
    entities beyond the trained vocabulary get a zero vector, or raise
    :class:`CoverageError` in strict mode.
    """
    entities = np.asarray(entities, dtype=np.int64)
    strict = spec.strict if strict is None else strict
    if entities.size and (entities.min() < 0 or entities.max() >= max(g.n_entities, spec.n_entities)):
        raise VocabLookupError("entity id out of range")
    if spec.attributes_on and g.attributes is not None:
        return ad.matvec(view.single("attr_proj"), g.attributes[entities])
    unseen = entities >= spec.n_entities
    if not unseen.any():
        return view.rows("entity", entities)
    if strict:
        raise CoverageError(f"entity {int(entities[unseen][0])} has no trained embedding and no attributes")
    safe = np.where(unseen, 0, entities)
    keep = (~unseen).astype(np.float64)[..., None]
    return ad.mul(view.rows("entity", safe), keep)


def attention_weights(h_emb, entries, view: ParamView, spec: ModelSpec) -> Tensor:
    """Attention over one entity's neighbor entries.

    ``entries`` is a list of ``(NeighborEntry, neighbor_embedding)``. The
    logit of entry i is ``u . leaky_relu(W [h; r_i; t_i])``; the weights are
    their softmax.
    """
    if not entries:
        raise ContractError("attention over an empty neighbor list")
    rel_ids = np.array([_attn_relation_id(e.relation, e.direction, spec) for e, _ in entries])
    rel = view.rows(spec.attn_relation_group, rel_ids)
    nbr = ad.concat([ad.reshape(emb, (1, -1)) for _, emb in entries], axis=0)
    h = ad.add(ad.reshape(h_emb, (1, -1)), np.zeros((len(entries), 1)))
    feats = ad.concat([h, rel, nbr], axis=-1)
    hidden = ad.leaky_relu(ad.matvec(view.single("attn_W"), feats), spec.leaky_slope)
    logits = ad.dot(hidden, view.single("attn_u"))
    return ad.softmax(logits)


def aggregate(h_emb, entries, view: ParamView, spec: ModelSpec) -> Tensor:
    """``sum_i alpha_i * e_{t_i}``; the zero vector when ``entries`` is empty."""
    if not entries:
        return Tensor(np.zeros(spec.dim))
    alpha = attention_weights(h_emb, entries, view, spec)
    nbr = ad.concat([ad.reshape(emb, (1, -1)) for _, emb in entries], axis=0)
    return ad.sum(ad.mul(ad.reshape(alpha, (-1, 1)), nbr), axis=0)


def _attn_relation_id(relation, direction, spec: ModelSpec):
    if spec.inverse_edges:
        return relation + spec.n_relations * direction
    return relation


def required_rows(sg: SubGraph, spec: ModelSpec, g: KnowledgeGraph) -> dict:
    """Parameter rows an :func:`encode` call over ``sg`` will read."""
    req = {name: np.zeros(1, np.int64) for name in SINGLE_GROUPS
           if name != "attr_proj" or spec.attributes_on}
    if not (spec.attributes_on and g.attributes is not None):
        ents = sg.nodes[sg.nodes < spec.n_entities]
        req["entity"] = np.unique(np.concatenate([ents, [0]]) if len(ents) < len(sg.nodes) else ents)
    rel = _attn_relation_id(sg.nbr_rel[sg.mask], sg.nbr_dir[sg.mask].astype(np.int64), spec)
    req[spec.attn_relation_group] = np.unique(rel)
    return req


def encode(sg: SubGraph, view: ParamView, spec: ModelSpec, g: KnowledgeGraph) -> EncodedBatch:
    """Run K rounds of attention aggregation + LSTM update over ``sg``.

    Returns final embeddings for ``sg``'s unique seeds in first-seen order.
    """
    if spec.encoder != "gnn":
        raise ContractError("encode() needs the gnn encoder")
    if sg.hops != spec.hops:
        raise ContractError(f"subgraph sampled with K={sg.hops}, encoder expects K={spec.hops}")
    d = spec.dim
    h_dim = spec.attention_hidden
    E = base_embedding(sg.nodes, view, spec, g)
    C = Tensor(np.zeros((sg.num_nodes, d)))
    W = view.single("attn_W")
    u = view.single("attn_u")
    W_self, W_rel, W_nbr = ad.take(W, 0, d), ad.take(W, d, 2 * d), ad.take(W, 2 * d, 3 * d)
    lstm_W, lstm_b = view.single("lstm_W"), view.single("lstm_b")

    rel_ids = _attn_relation_id(sg.nbr_rel, sg.nbr_dir.astype(np.int64), spec)
    rel_ids = np.where(sg.mask, rel_ids, rel_ids[sg.mask][0] if sg.mask.any() else 0)
    uniq_rel, rel_pos = np.unique(rel_ids, return_inverse=True)
    rel_pos = rel_pos.reshape(rel_ids.shape)
    if sg.mask.any():
        rel_proj = ad.matvec(W_rel, view.rows(spec.attn_relation_group, uniq_rel))
    else:
        rel_proj = Tensor(np.zeros((1, h_dim)))

    for step in range(spec.hops):
        n = sg.active_count(step)
        idx = sg.nbr_index[:n]
        mask = sg.mask[:n]
        width = idx.shape[1]
        E_self = ad.take(E, 0, n, axis=0)
        pre = ad.add(ad.reshape(ad.matvec(W_self, E_self), (n, 1, h_dim)),
                     ad.gather_rows(rel_proj, rel_pos[:n]))
        pre = ad.add(pre, ad.gather_rows(ad.matvec(W_nbr, E), idx))
        logits = ad.dot(ad.leaky_relu(pre, spec.leaky_slope), u)
        alpha = ad.softmax(logits, mask=mask)
        msg = ad.sum(ad.mul(ad.reshape(alpha, (n, width, 1)), ad.gather_rows(E, idx)), axis=1)
        E, C = ad.lstm_cell(msg, E_self, ad.take(C, 0, n, axis=0), lstm_W, lstm_b)

    n_seeds = int(np.searchsorted(sg.depth, 0, side="right"))
    out = ad.take(E, 0, n_seeds, axis=0)
    return EncodedBatch(sg.nodes[:n_seeds], out, view.tape)


def lookup_encode(entities, view: ParamView, spec: ModelSpec, g: Optional[KnowledgeGraph] = None) -> EncodedBatch:
    """Raw embedding rows, as used by the decoder-only baselines."""
    entities = np.asarray(entities, dtype=np.int64).ravel()
    _, first = np.unique(entities, return_index=True)
    uniq = entities[np.sort(first)]
    if g is not None and (spec.attributes_on and g.attributes is not None or uniq.max() >= spec.n_entities):
        emb = base_embedding(uniq, view, spec, g)
    else:
        if uniq.size and (uniq.min() < 0 or uniq.max() >= spec.n_entities):
            raise VocabLookupError("entity id out of range")
        emb = view.rows("entity", uniq)
    return EncodedBatch(uniq, emb, view.tape)
