"""Link prediction (HR@k) and triplet classification (AUC)."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import decoder as dec
from . import encoder as enc
from .errors import ContractError
from .kgstore import KnowledgeGraph
from .params import DecoderKind, ModelSpec, ParameterStore
from .sampler import SamplerConfig, corrupt_batch, sample_subgraph, worker_rng

EVAL_SEED = 0x5EED
EVAL_STREAM = 0xE7A1
MAX_BLOCK = 1 << 21


class Model:
    """A trained parameter snapshot bound to a graph, ready to score triples."""

    def __init__(self, spec: ModelSpec, store: ParameterStore, g: KnowledgeGraph,
                 sampler_cfg: Optional[SamplerConfig] = None, eval_seed: int = EVAL_SEED,
                 chunk: int = 512):
        self.spec = spec
        self.store = store
        self.g = g
        self.sampler_cfg = sampler_cfg or SamplerConfig.for_hops(max(spec.hops, 1))
        self.eval_seed = eval_seed
        self.chunk = chunk
        self._emb = None

    def view(self) -> enc.ParamView:
        return enc.ParamView(self.store.full_view(), None, singles=enc.SINGLE_GROUPS)

    def entity_embeddings(self) -> np.ndarray:
        """Final representation of every entity in the graph (cached)."""
        if self._emb is not None:
            return self._emb
        view = self.view()
        ids = np.arange(self.g.n_entities)
        if self.spec.encoder == "lookup":
            if self.spec.attributes_on or self.g.n_entities > self.spec.n_entities:
                emb = enc.base_embedding(ids, view, self.spec, self.g).data
            else:
                emb = self.store.values["entity"].copy()
        else:
            rng = worker_rng(self.eval_seed, EVAL_STREAM)
            parts = []
            for lo in range(0, len(ids), self.chunk):
                sg = sample_subgraph(ids[lo:lo + self.chunk], self.g, self.sampler_cfg, rng, hops=self.spec.hops)
                parts.append(enc.encode(sg, view, self.spec, self.g).embeddings.data)
            emb = np.concatenate(parts) if parts else np.zeros((0, self.spec.dim))
        self._emb = emb
        return emb

    def relation(self, r):
        vals = self.store.values
        extra = None
        if self.spec.decoder is DecoderKind.TRANSH:
            extra = vals["hyperplane"][r]
        elif self.spec.decoder is DecoderKind.TRANSR:
            extra = vals["proj"][r]
        return vals["relation"][r], extra

    def energy(self, triples) -> np.ndarray:
        """Energies of specific triples through the generic decoder path."""
        t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        E = self.entity_embeddings()
        e_r, extra = self.relation(t[:, 1])
        return dec.score(self.spec, E[t[:, 0]], e_r, extra, E[t[:, 2]]).data

    def candidate_energies(self, anchors, relations, side: str) -> np.ndarray:
        """``(B, |E|)`` energies replacing the ``side`` slot with every entity."""
        E = self.entity_embeddings()
        anchors = np.asarray(anchors, dtype=np.int64)
        relations = np.asarray(relations, dtype=np.int64)
        e_r, extra = self.relation(relations)
        a = E[anchors]
        kind = self.spec.decoder
        if kind is DecoderKind.DISTMULT:
            return -((a * e_r) @ E.T)
        if kind is DecoderKind.TRANSH:
            w = extra
            a = a - np.sum(a * w, axis=1, keepdims=True) * w
            cand = E[None, :, :] - (E @ w.T).T[:, :, None] * w[:, None, :]
        elif kind is DecoderKind.TRANSR:
            a = np.einsum("bij,bj->bi", extra, a)
            cand = np.einsum("bij,nj->bni", extra, E)
        else:
            cand = E[None, :, :]
        if side == "tail":
            diff = (a + e_r)[:, None, :] - cand
        else:
            diff = cand + (e_r - a)[:, None, :]
        if self.spec.norm == "L1":
            return np.abs(diff).sum(axis=-1)
        return np.sqrt(np.einsum("bnd,bnd->bn", diff, diff))


def _ranks(energies: np.ndarray, true_ids: np.ndarray, filters: Sequence[np.ndarray]) -> np.ndarray:
    true_e = energies[np.arange(len(true_ids)), true_ids]
    better = energies < true_e[:, None]
    for i, known in enumerate(filters):
        if known is not None and len(known):
            drop = known[known != true_ids[i]]
            better[i, drop] = False
    return 1 + better.sum(axis=1)


def rank_batch(model: Model, triples, mode: str = "filtered", batch: Optional[int] = None):
    """Optimistic head and tail ranks of each triple."""
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    g = model.g
    if batch is None:
        # keep the (batch, |E|, d) candidate block near 16 MB
        batch = int(np.clip(MAX_BLOCK // max(1, g.n_entities * model.spec.dim), 1, 256))
    filtered = mode == "filtered"
    if mode not in ("raw", "filtered"):
        raise ValueError(f"mode must be raw or filtered, got {mode!r}")
    heads, tails = np.zeros(len(t), np.int64), np.zeros(len(t), np.int64)
    for lo in range(0, len(t), batch):
        sl = t[lo:lo + batch]
        e_tail = model.candidate_energies(sl[:, 0], sl[:, 1], "tail")
        f_tail = [g.known_tails(h, r) for h, r, _ in sl.tolist()] if filtered else [None] * len(sl)
        tails[lo:lo + batch] = _ranks(e_tail, sl[:, 2], f_tail)
        e_head = model.candidate_energies(sl[:, 2], sl[:, 1], "head")
        f_head = [g.known_heads(r, tt) for _, r, tt in sl.tolist()] if filtered else [None] * len(sl)
        heads[lo:lo + batch] = _ranks(e_head, sl[:, 0], f_head)
    return heads, tails


def rank_triple(t, model: Model, g: Optional[KnowledgeGraph] = None, mode: str = "filtered"):
    heads, tails = rank_batch(model, [tuple(t)], mode)
    return int(heads[0]), int(tails[0])


@dataclass
class RankingResult:
    hits: dict
    mean_rank: float
    mode: str
    side: str

    def __getitem__(self, k):
        return self.hits[k]

    def rows(self):
        return [[self.mode, self.side, k, repr(float(v)), repr(float(self.mean_rank))]
                for k, v in sorted(self.hits.items())]


def _result(ranks: np.ndarray, ks, mode, side) -> RankingResult:
    return RankingResult({k: float(np.mean(ranks <= k)) for k in ks}, float(np.mean(ranks)), mode, side)


def link_prediction(model: Model, test, ks=(1, 3, 10), mode: str = "filtered",
                    detailed: bool = False):
    """HR@k averaged over head and tail queries.

    With ``detailed`` returns ``[head, tail, both]`` results.
    """
    test = np.asarray(test, dtype=np.int64).reshape(-1, 3)
    if len(test) == 0:
        raise ContractError("empty test split")
    heads, tails = rank_batch(model, test, mode)
    both = _result(np.concatenate([heads, tails]), ks, mode, "both")
    if detailed:
        return [_result(heads, ks, mode, "head"), _result(tails, ks, mode, "tail"), both]
    return both


def auc_rank_sum(pos_energy, neg_energy) -> float:
    """AUC where lower energy predicts a positive; ties count 1/2."""
    pos = np.asarray(pos_energy, dtype=np.float64)
    neg = np.asarray(neg_energy, dtype=np.float64)
    n_pos, n_neg = len(pos), len(neg)
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs at least one positive and one negative")
    ranks = rankdata(-np.concatenate([pos, neg]))
    return float((ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class ClassificationResult:
    auc: float
    positives: int
    negatives: int
    seed: int

    def rows(self):
        return [[repr(self.auc), self.positives, self.negatives, self.seed]]


def triplet_classification(model: Model, g: KnowledgeGraph, test, seed: int = EVAL_SEED) -> ClassificationResult:
    test = np.asarray(test, dtype=np.int64).reshape(-1, 3)
    if len(test) == 0:
        raise ContractError("empty test split")
    cfg = SamplerConfig(negatives_per_positive=1, filter_false_negatives=True)
    neg, _ = corrupt_batch(test, g, cfg, worker_rng(seed, 0xC1A5))
    auc = auc_rank_sum(model.energy(test), model.energy(neg))
    return ClassificationResult(auc, len(test), len(neg), seed)


# reports --------------------------------------------------------------------

def write_ranking_csv(path, results: Iterable[RankingResult]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "side", "k", "hit_ratio", "mean_rank"])
        for r in results:
            w.writerows(r.rows())


def write_classification_csv(path, result: ClassificationResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["auc", "n_pos", "n_neg", "seed"])
        w.writerows(result.rows())


@dataclass
class SweepPoint:
    setting: int
    hr10: float
    epoch_seconds: float
    metrics: dict = field(default_factory=dict)


@dataclass
class SweepReport:
    axis: str
    points: list = field(default_factory=list)

    def add(self, point: SweepPoint):
        if self.points and point.setting <= self.points[-1].setting:
            raise ContractError("sweep settings must be strictly increasing")
        self.points.append(point)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["setting", "hr10", "epoch_seconds"])
            for p in self.points:
                w.writerow([p.setting, repr(p.hr10), f"{p.epoch_seconds:.6f}"])

    def write_plot_data(self, directory):
        """(x, y) series files matching the hop and worker figures."""
        os.makedirs(directory, exist_ok=True)
        series = {"hr10": [(p.setting, p.hr10) for p in self.points],
                  "epoch_seconds": [(p.setting, p.epoch_seconds) for p in self.points]}
        paths = []
        for name, pts in series.items():
            path = os.path.join(directory, f"{self.axis}_{name}.csv")
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["x", "y"])
                w.writerows([x, repr(float(y))] for x, y in pts)
            paths.append(path)
        return paths


def sweep(axis: str, values: Sequence[int], run_point: Callable[[int], SweepPoint]) -> SweepReport:
    values = list(values)
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ContractError(f"{axis} values must be strictly increasing")
    report = SweepReport(axis)
    for v in values:
        report.add(run_point(v))
    return report
