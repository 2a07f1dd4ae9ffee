"""Margin-ranking training loop."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import encoder as enc
from .autodiff import Gradients, Tape
from .errors import ConfigError, ContractError, NumericError, TrainingAborted
from .kgstore import KnowledgeGraph
from .params import AdamConfig, DecoderKind, LocalAccess, ModelSpec, ParameterStore
from .ps.protocol import store_checkpoint_bytes
from .sampler import SamplerConfig, corrupt_batch, sample_subgraph, worker_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 256
    margin: float = 1.0
    epochs: int = 10
    decoder: str = "TransH"
    encoder: str = "gnn"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    norm: str = "L2"
    keep_checkpoints: int = 2
    patience: int = 0  # early stopping on valid filtered HR@10; 0 disables

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("train.lr", "must be positive")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if self.margin <= 0:
            raise ConfigError("train.margin", "must be positive")
        if self.epochs < 0:
            raise ConfigError("train.epochs", "must be >= 0")
        self.decoder = DecoderKind.parse(self.decoder).value

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.learning_rate, self.beta1, self.beta2, self.eps)


@dataclass
class EpochReport:
    epoch: int
    loss: float
    seconds: float
    active_pairs: int

    def row(self):
        return [self.epoch, repr(self.loss), f"{self.seconds:.6f}", self.active_pairs]


@dataclass
class BatchResult:
    loss: float
    grads: Gradients
    active_pairs: int
    pairs: int


def margin_loss(pos_energy, neg_energy, margin: float):
    """``max(0, pos + margin - neg)`` elementwise."""
    return ad.hinge(ad.sub(ad.add(pos_energy, margin), neg_energy))


def epoch_batches(n_triples: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded shuffle of ``range(n_triples)`` cut into batches; identical on every worker."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0xE90C, epoch))))
    perm = rng.permutation(n_triples)
    return [perm[i:i + batch_size] for i in range(0, n_triples, batch_size)]


def _merge_requests(*reqs) -> dict:
    out: dict = {}
    for req in reqs:
        for name, rows in req.items():
            out[name] = rows if name not in out else np.union1d(out[name], rows)
    return {n: np.unique(np.asarray(r, np.int64)) for n, r in out.items()}


def batch_energies(pos, neg, g: KnowledgeGraph, spec: ModelSpec, sampler_cfg: SamplerConfig,
                   access, rng, tape: Optional[Tape]):
    """Encode and score positives and negatives; returns ``(pos_energy, neg_energy)`` tensors."""
    seeds = np.unique(np.concatenate([pos[:, [0, 2]].ravel(), neg[:, [0, 2]].ravel()]))
    rel_pos, rel_neg = pos[:, 1], neg[:, 1]
    dec_req = dec.required_rows(rel_pos, spec)
    if spec.encoder == "gnn":
        sg = sample_subgraph(seeds, g, sampler_cfg, rng, hops=spec.hops)
        req = _merge_requests(enc.required_rows(sg, spec, g), dec_req)
    else:
        sg = None
        if spec.attributes_on and g.attributes is not None:
            ent_req = {"attr_proj": np.zeros(1, np.int64)}
        else:
            ent_req = {"entity": seeds[seeds < spec.n_entities]}
        req = _merge_requests(ent_req, dec_req)
    view = enc.ParamView(access.pull(req), tape, singles=enc.SINGLE_GROUPS)
    if sg is not None:
        encoded = enc.encode(sg, view, spec, g)
    else:
        encoded = enc.lookup_encode(seeds, view, spec, g)
    E = encoded.embeddings

    def energies(triples, rels):
        eh = ad.gather_rows(E, encoded.positions(triples[:, 0]))
        et = ad.gather_rows(E, encoded.positions(triples[:, 2]))
        e_r, extra = dec.relation_params(view, rels, spec)
        return dec.score(spec, eh, e_r, extra, et)

    return energies(pos, rel_pos), energies(neg, rel_neg)


def train_batch(batch, g: KnowledgeGraph, spec: ModelSpec, cfg: TrainConfig,
                sampler_cfg: SamplerConfig, access, rng) -> BatchResult:
    """One forward/backward pass over ``batch``; returns loss and sparse gradients."""
    pos = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    if len(pos) == 0:
        raise ContractError("empty batch")
    neg, _ = corrupt_batch(pos, g, sampler_cfg, rng)
    k = sampler_cfg.negatives_per_positive
    tape = Tape()
    pos_e, neg_e = batch_energies(pos, neg, g, spec, sampler_cfg, access, rng, tape)
    if k > 1:
        pos_e = ad.gather_rows(pos_e, np.repeat(np.arange(len(pos)), k))
    losses = margin_loss(pos_e, neg_e, cfg.margin)
    loss = ad.sum(losses)
    grads = tape.backward(loss)
    return BatchResult(float(loss.data), grads, int(np.count_nonzero(losses.data > 0)), len(neg))


def batch_loss(batch, g, spec, cfg, sampler_cfg, access, rng) -> float:
    """Forward-only loss of ``batch`` (no tape)."""
    pos = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    neg, _ = corrupt_batch(pos, g, sampler_cfg, rng)
    k = sampler_cfg.negatives_per_positive
    pos_e, neg_e = batch_energies(pos, neg, g, spec, sampler_cfg, access, rng, None)
    return float(np.sum(np.maximum(0.0, np.repeat(pos_e.data, k) + cfg.margin - neg_e.data)))


def check_finite(result: BatchResult, epoch: int, batch: int):
    if not np.isfinite(result.loss):
        raise TrainingAborted(epoch, batch, result.grads.max_abs_key())
    for name, (rows, vals) in result.grads.blocks.items():
        if not np.all(np.isfinite(vals)):
            raise TrainingAborted(epoch, batch, result.grads.max_abs_key(), "non-finite gradient")


def checked_batch(batch, g, spec, cfg, sampler_cfg, access, rng, epoch: int, index: int) -> BatchResult:
    """:func:`train_batch` that turns any non-finite value into :class:`TrainingAborted`."""
    try:
        res = train_batch(batch, g, spec, cfg, sampler_cfg, access, rng)
    except NumericError as exc:
        raise TrainingAborted(epoch, index, None, f"non-finite value in {exc.op}") from exc
    check_finite(res, epoch, index)
    return res


class CheckpointWriter:
    """Writes ``epoch_XXXX.ckpt`` files and keeps the most recent ``keep``."""

    def __init__(self, directory: Optional[str], keep: int = 2):
        self.directory = directory
        self.keep = keep
        self.written: list[str] = []
        if directory:
            os.makedirs(directory, exist_ok=True)

    def path(self, epoch: int) -> str:
        return os.path.join(self.directory, f"epoch_{epoch:04d}.ckpt")

    def write(self, epoch: int, data: bytes) -> Optional[str]:
        if not self.directory:
            return None
        path = self.path(epoch)
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
        self.written.append(path)
        while len(self.written) > self.keep:
            old = self.written.pop(0)
            if os.path.exists(old):
                os.remove(old)
        with open(os.path.join(self.directory, "latest"), "w") as fh:
            fh.write(os.path.basename(path) + "\n")
        return path


def write_epoch_csv(path: str, reports: list[EpochReport]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "seconds", "active_pairs"])
        for r in reports:
            w.writerow(r.row())


@dataclass
class TrainResult:
    store: ParameterStore
    reports: list[EpochReport] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


def train(g: KnowledgeGraph, spec: ModelSpec, cfg: TrainConfig, sampler_cfg: SamplerConfig,
          out_dir: Optional[str] = None, on_epoch: Optional[Callable] = None,
          valid_fn: Optional[Callable] = None) -> TrainResult:
    """Local (single-threaded, bit-reproducible) training run.

    ``valid_fn(store) -> float`` enables early stopping when ``cfg.patience``
    is positive.
    """
    store = ParameterStore.initialize(spec, cfg.seed)
    access = LocalAccess(store, cfg.adam)
    rng = worker_rng(cfg.seed, 0)
    ckpt = CheckpointWriter(os.path.join(out_dir, "checkpoints") if out_dir else None, cfg.keep_checkpoints)
    result = TrainResult(store)
    ckpt.write(0, store_checkpoint_bytes(store))
    best, since_best = -np.inf, 0
    train_triples = g.split.train
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        total, pairs, active = 0.0, 0, 0
        for bi, idx in enumerate(epoch_batches(len(train_triples), cfg.batch_size, cfg.seed, epoch)):
            res = checked_batch(train_triples[idx], g, spec, cfg, sampler_cfg, access, rng, epoch, bi)
            access.push(res.grads)
            total += res.loss
            pairs += res.pairs
            active += res.active_pairs
        report = EpochReport(epoch, total / max(pairs, 1), time.perf_counter() - t0, active)
        result.reports.append(report)
        log.info("epoch %d loss %.6f time %.2fs active %d", epoch, report.loss, report.seconds, active)
        path = ckpt.write(epoch, store_checkpoint_bytes(store))
        if path:
            result.checkpoints.append(path)
        if out_dir:
            write_epoch_csv(os.path.join(out_dir, "epochs.csv"), result.reports)
        if on_epoch is not None:
            on_epoch(report, store)
        if cfg.patience > 0 and valid_fn is not None:
            score = valid_fn(store)
            if score > best:
                best, since_best = score, 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    log.info("early stop at epoch %d (best valid HR@10 %.4f)", epoch, best)
                    break
    if out_dir and not result.reports:
        write_epoch_csv(os.path.join(out_dir, "epochs.csv"), result.reports)
    return result
