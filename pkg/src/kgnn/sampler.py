"""Negative sampling and layered k-hop subgraph sampling."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ContractError, ExhaustionError
from .kgstore import Direction, KnowledgeGraph, NeighborEntry, Triple

DEFAULT_FANOUT = (16, 8, 8, 8)
MAX_FILTER_RETRIES = 100


class Slot(enum.IntEnum):
    HEAD = 0
    TAIL = 1


class CorruptedTriple(NamedTuple):
    triple: Triple
    corrupted_slot: Slot


@dataclass
class SamplerConfig:
    fanout_per_hop: tuple = DEFAULT_FANOUT[:2]
    negatives_per_positive: int = 1
    filter_false_negatives: bool = True
    seed: int = 0

    def __post_init__(self):
        self.fanout_per_hop = tuple(int(f) for f in self.fanout_per_hop)
        if len(self.fanout_per_hop) < 1:
            raise ConfigError("sampler.fanout", "at least one hop is required")
        if any(f < 1 for f in self.fanout_per_hop):
            raise ConfigError("sampler.fanout", "fanout entries must be >= 1")
        if self.negatives_per_positive < 1:
            raise ConfigError("sampler.negatives", "must be >= 1")

    @property
    def hops(self) -> int:
        return len(self.fanout_per_hop)

    @classmethod
    def for_hops(cls, hops: int, fanout=None, **kw) -> "SamplerConfig":
        """Config with ``hops`` layers, truncating/extending the default fanout."""
        if hops < 1:
            raise ConfigError("encoder.hops", "K must be >= 1")
        base = tuple(fanout) if fanout else DEFAULT_FANOUT
        if len(base) < hops:
            base = base + (base[-1],) * (hops - len(base))
        return cls(fanout_per_hop=base[:hops], **kw)


def worker_rng(seed: int, worker_id: int = 0) -> np.random.Generator:
    """Independent stream per worker; stream id is the worker id."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(worker_id,))))


def _draw_excluding(rng, n, exclude):
    """Uniform draws over ``[0, n)`` minus the per-row ``exclude`` value."""
    x = rng.integers(0, n - 1, size=np.shape(exclude))
    return x + (x >= exclude)


def corrupt_batch(triples: np.ndarray, g: KnowledgeGraph, cfg: SamplerConfig,
                  rng: np.random.Generator):
    """Corrupt every row of ``triples`` ``negatives_per_positive`` times.

    Returns ``(negatives, slots)``: an ``(n * k, 3)`` array laid out so that
    row ``i * k + j`` is the j-th corruption of positive ``i``, and the slot
    replaced in each row.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    n_ent = g.n_entities
    if n_ent < 2:
        raise ExhaustionError("cannot corrupt a triple when |E| < 2")
    k = cfg.negatives_per_positive
    src = np.repeat(triples, k, axis=0)
    slots = rng.integers(0, 2, size=len(src))
    col = np.where(slots == Slot.HEAD, 0, 2)
    rows = np.arange(len(src))
    neg = src.copy()
    neg[rows, col] = _draw_excluding(rng, n_ent, src[rows, col])
    if cfg.filter_false_negatives and len(neg):
        bad = np.flatnonzero(g.contains(neg))
        for _ in range(MAX_FILTER_RETRIES):
            if len(bad) == 0:
                break
            neg[bad, col[bad]] = _draw_excluding(rng, n_ent, src[bad, col[bad]])
            bad = bad[g.contains(neg[bad])]
    return neg, slots


def corrupt(t, g: KnowledgeGraph, cfg: SamplerConfig, rng: np.random.Generator) -> list[CorruptedTriple]:
    neg, slots = corrupt_batch(np.asarray([tuple(t)]), g, cfg, rng)
    return [CorruptedTriple(Triple(*map(int, row)), Slot(int(s))) for row, s in zip(neg, slots)]


@dataclass
class SubGraph:
    """Layered neighborhood sample.

    ``nodes`` lists every touched entity in discovery order (seeds first,
    then hop 1, ...), so ``depth`` is non-decreasing and the nodes that own
    a neighbor list form a prefix. Neighbor lists are stored padded:
    ``nbr_index[i, j]`` is the local index of the j-th sampled neighbor of
    node ``i`` and is meaningful where ``mask[i, j]`` is set.
    """

    seed_entities: np.ndarray
    nodes: np.ndarray
    depth: np.ndarray
    hops: int
    nbr_index: np.ndarray
    nbr_rel: np.ndarray
    nbr_dir: np.ndarray
    mask: np.ndarray
    _index: dict = field(default=None, repr=False, compare=False)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def node_index(self) -> dict:
        if self._index is None:
            self._index = {int(e): i for i, e in enumerate(self.nodes.tolist())}
        return self._index

    def seed_positions(self, entities) -> np.ndarray:
        """Local indices of ``entities`` (any shape)."""
        index = self.node_index
        flat = [index[e] for e in np.ravel(entities).tolist()]
        return np.asarray(flat, dtype=np.int64).reshape(np.shape(entities))

    def active_count(self, step: int) -> int:
        """Number of nodes updated at encoder step ``step`` (0-based)."""
        return int(np.searchsorted(self.depth, self.hops - 1 - step, side="right"))

    def layer(self, k: int) -> dict[int, list[NeighborEntry]]:
        """Hop ``k`` (1-based): frontier entity -> sampled neighbor entries."""
        if not 1 <= k <= self.hops:
            raise ContractError(f"layer {k} outside 1..{self.hops}")
        out = {}
        for i in np.flatnonzero(self.depth == k - 1):
            m = self.mask[i]
            out[int(self.nodes[i])] = [
                NeighborEntry(int(r), int(self.nodes[j]), Direction(int(d)))
                for r, j, d in zip(self.nbr_rel[i][m], self.nbr_index[i][m], self.nbr_dir[i][m])]
        return out


def _sample_edges(g: KnowledgeGraph, entities: np.ndarray, fanout: int, rng):
    """Pick up to ``fanout`` adjacency slots per entity, uniformly without replacement.

    Returns ``(owner_pos, edge_idx)`` with edges kept in adjacency order.
    """
    starts = g.indptr[entities]
    deg = g.indptr[entities + 1] - starts
    total = int(deg.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    owner = np.repeat(np.arange(len(entities)), deg)
    offsets = np.arange(total) - np.repeat(np.cumsum(deg) - deg, deg)
    edge = np.repeat(starts, deg) + offsets
    big = deg > fanout
    if not big.any():
        return owner, edge
    keys = np.where(big[owner], rng.random(total), 0.0)
    # rank of each edge's key within its owner's segment
    order = np.lexsort((keys, owner))
    rank = np.empty(total, np.int64)
    # sorting by owner first keeps every segment at its original position
    rank[order] = np.arange(total) - np.repeat(np.cumsum(deg) - deg, deg)
    keep = ~big[owner] | (rank < fanout)
    return owner[keep], edge[keep]


def _first_seen_unique(values: np.ndarray) -> np.ndarray:
    _, first = np.unique(values, return_index=True)
    return values[np.sort(first)]


def sample_subgraph(seeds, g: KnowledgeGraph, cfg: SamplerConfig, rng: np.random.Generator,
                    hops: int | None = None) -> SubGraph:
    hops = cfg.hops if hops is None else hops
    if hops < 1:
        raise ContractError("subgraph sampling needs K >= 1")
    if hops > len(cfg.fanout_per_hop):
        raise ContractError(f"fanout given for {len(cfg.fanout_per_hop)} hops, {hops} requested")
    seeds = np.asarray(seeds, dtype=np.int64).ravel()
    if seeds.size == 0:
        raise ContractError("seed list is empty")
    if seeds.min() < 0 or seeds.max() >= g.n_entities:
        raise ContractError("seed id out of range")

    frontier = _first_seen_unique(seeds)
    local = np.full(g.n_entities, -1, np.int64)
    local[frontier] = np.arange(len(frontier))
    nodes = [frontier]
    depth = [np.zeros(len(frontier), np.int64)]
    owners, edges = [], []
    n_nodes = len(frontier)
    for k in range(hops):
        owner, edge = _sample_edges(g, frontier, cfg.fanout_per_hop[k], rng)
        owners.append(local[frontier][owner])
        edges.append(edge)
        cand = g.nbr_ent[edge]
        frontier = _first_seen_unique(cand[local[cand] < 0])
        local[frontier] = np.arange(n_nodes, n_nodes + len(frontier))
        n_nodes += len(frontier)
        nodes.append(frontier)
        depth.append(np.full(len(frontier), k + 1, np.int64))

    nodes_arr = np.concatenate(nodes)
    depth_arr = np.concatenate(depth)
    n_listed = int(np.searchsorted(depth_arr, hops - 1, side="right"))
    owners = np.concatenate(owners)
    edges = np.concatenate(edges)
    counts = np.bincount(owners, minlength=n_listed)[:n_listed]
    width = max(int(counts.max()) if len(counts) else 0, 1)
    nbr_index = np.zeros((n_listed, width), np.int64)
    nbr_rel = np.zeros((n_listed, width), np.int64)
    nbr_dir = np.zeros((n_listed, width), np.int8)
    mask = np.zeros((n_listed, width), bool)
    if len(edges):
        order = np.argsort(owners, kind="stable")
        owners, edges = owners[order], edges[order]
        slot = np.arange(len(owners)) - np.repeat(np.cumsum(counts) - counts, counts)
        nbr_index[owners, slot] = local[g.nbr_ent[edges]]
        nbr_rel[owners, slot] = g.nbr_rel[edges]
        nbr_dir[owners, slot] = g.nbr_dir[edges]
        mask[owners, slot] = True
    return SubGraph(seed_entities=seeds, nodes=nodes_arr, depth=depth_arr, hops=hops,
                    nbr_index=nbr_index, nbr_rel=nbr_rel, nbr_dir=nbr_dir, mask=mask)
