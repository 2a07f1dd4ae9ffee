"""Training worker: pull, compute, push, with barriers only at epoch edges."""

from __future__ import annotations

import logging
import time
from typing import Callable, Optional

from ..kgstore import KnowledgeGraph
from ..params import ModelSpec
from ..sampler import SamplerConfig, worker_rng
from ..trainer import TrainConfig, checked_batch, epoch_batches

log = logging.getLogger(__name__)

REGISTER_BARRIER = 0


def start_barrier(epoch: int) -> int:
    return 2 * epoch


def end_barrier(epoch: int) -> int:
    return 2 * epoch + 1


def assigned_batches(n_triples: int, cfg: TrainConfig, epoch: int, worker_id: int, n_workers: int):
    """This worker's share of the epoch: the shuffled batch list striped by worker id."""
    return epoch_batches(n_triples, cfg.batch_size, cfg.seed, epoch)[worker_id::n_workers]


def worker_loop(worker_id: int, n_workers: int, g: KnowledgeGraph, spec: ModelSpec, cfg: TrainConfig,
                sampler_cfg: SamplerConfig, client, report: Callable[[tuple], None],
                fault: Optional[Callable[[int, int, int], None]] = None):
    """Run every epoch of this worker's batches against ``client``.

    ``report`` receives ``("start"|"end", worker, epoch, time)`` events and
    one ``("stats", worker, epoch, loss_sum, pairs, active)`` tuple per epoch.
    ``fault`` is a test hook called before each batch.
    """
    parties = n_workers + 1
    rng = worker_rng(cfg.seed, worker_id)
    train = g.split.train
    client.barrier(REGISTER_BARRIER, parties)
    for epoch in range(1, cfg.epochs + 1):
        client.barrier(start_barrier(epoch), parties)
        report(("start", worker_id, epoch, time.monotonic()))
        total, pairs, active = 0.0, 0, 0
        for i, idx in enumerate(assigned_batches(len(train), cfg, epoch, worker_id, n_workers)):
            if fault is not None:
                fault(worker_id, epoch, i)
            res = checked_batch(train[idx], g, spec, cfg, sampler_cfg, client, rng, epoch, worker_id + i * n_workers)
            client.push(res.grads)
            total += res.loss
            pairs += res.pairs
            active += res.active_pairs
        report(("stats", worker_id, epoch, total, pairs, active))
        report(("end", worker_id, epoch, time.monotonic()))
        client.barrier(end_barrier(epoch), parties)
    log.debug("worker %d finished", worker_id)
