"""Coordinator: epoch barriers, checkpoints and per-epoch timing for a distributed run."""

from __future__ import annotations

import logging
import multiprocessing as mp
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..errors import CheckpointError, KGNNError, ProtocolError, RunAborted, TrainingAborted
from ..kgstore import KnowledgeGraph
from ..params import ModelSpec, ParameterStore
from ..sampler import SamplerConfig
from ..trainer import CheckpointWriter, EpochReport, TrainConfig, TrainResult, write_epoch_csv
from . import protocol as pr
from .client import InProcChannel, PSClient, TcpChannel
from .server import ShardServer, TcpShardServer
from .worker import REGISTER_BARRIER, end_barrier, start_barrier, worker_loop

log = logging.getLogger(__name__)

TRANSPORTS = ("inproc", "tcp")


def default_shards(workers: int) -> int:
    return max(1, workers // 2)


@dataclass
class Event:
    time: float
    actor: str
    kind: str
    epoch: int


@dataclass
class DistributedResult(TrainResult):
    events: list = field(default_factory=list)
    workers: int = 1
    shards: int = 1


def assemble_store(spec: ModelSpec, blocks) -> ParameterStore:
    """Rebuild a full store from shard dumps; every key must appear exactly once."""
    store = ParameterStore(spec)
    seen = {name: np.zeros(len(v), np.int64) for name, v in store.values.items()}
    for b in blocks:
        for name, pos, rows in store.resolve_many(b.kind, b.ids):
            g = store.groups[name]
            store.values[name][rows] = b.values[pos].reshape((len(pos),) + g.shape)
            np.add.at(seen[name], rows, 1)
    for name, count in seen.items():
        if np.any(count != 1):
            raise CheckpointError(f"{name}: shard dumps cover {int((count == 0).sum())} rows zero times "
                                  f"and {int((count > 1).sum())} rows more than once")
    return store


class Coordinator:
    """Sequential control loop: registration, epoch barriers, checkpoints."""

    def __init__(self, spec: ModelSpec, client: PSClient, n_workers: int,
                 writer: Optional[CheckpointWriter] = None):
        self.spec = spec
        self.client = client
        self.n_workers = n_workers
        self.parties = n_workers + 1
        self.writer = writer or CheckpointWriter(None)
        self.events: list[Event] = []

    def _event(self, kind, epoch):
        self.events.append(Event(time.monotonic(), "coordinator", kind, epoch))

    def register(self):
        self.client.barrier(REGISTER_BARRIER, self.parties)
        self._event("registered", 0)

    def snapshot(self) -> ParameterStore:
        return assemble_store(self.spec, self.client.checkpoint_records())

    def checkpoint(self, epoch: int) -> tuple[ParameterStore, Optional[str]]:
        store = self.snapshot()
        path = self.writer.write(epoch, pr.store_checkpoint_bytes(store))
        self._event("checkpoint", epoch)
        return store, path

    def epoch(self, epoch: int) -> tuple[float, float]:
        self.client.barrier(start_barrier(epoch), self.parties)
        t0 = time.monotonic()
        self._event("release", epoch)
        self.client.barrier(end_barrier(epoch), self.parties)
        t1 = time.monotonic()
        self._event("complete", epoch)
        return t0, t1


class _ThreadWorker:
    def __init__(self, target, args):
        self.error: Optional[BaseException] = None
        self.thread = threading.Thread(target=self._run, args=(target, args), daemon=True)

    def _run(self, target, args):
        try:
            target(*args)
        except BaseException as exc:  # reported through the monitor
            self.error = exc

    def start(self):
        self.thread.start()

    def failed(self) -> bool:
        return self.error is not None

    def join(self, timeout=None):
        self.thread.join(timeout)


class _ProcessWorker:
    def __init__(self, ctx, target, args):
        self.proc = ctx.Process(target=target, args=args, daemon=True)
        self.error = None

    def start(self):
        self.proc.start()

    def failed(self) -> bool:
        return self.proc.exitcode not in (None, 0)

    def join(self, timeout=None):
        self.proc.join(timeout)
        if self.proc.is_alive():
            self.proc.terminate()
            self.proc.join(1)


def _process_main(worker_id, n_workers, g, spec, cfg, sampler_cfg, endpoints, messages, fault, listeners):
    for sock in listeners:
        sock.close()
    client = PSClient(spec, [TcpChannel(e) for e in endpoints])
    code = 0
    try:
        worker_loop(worker_id, n_workers, g, spec, cfg, sampler_cfg, client, messages.put, fault)
    except BaseException as exc:
        info = (exc.epoch, exc.batch, exc.key) if isinstance(exc, TrainingAborted) else None
        messages.put(("error", worker_id, type(exc).__name__, str(exc), info))
        code = 1
    finally:
        client.close()
        messages.close()
        messages.join_thread()
    os._exit(code)


def run_distributed(g: KnowledgeGraph, spec: ModelSpec, cfg: TrainConfig, sampler_cfg: SamplerConfig,
                    workers: int = 1, shards: Optional[int] = None, transport: str = "inproc",
                    out_dir: Optional[str] = None, on_epoch: Optional[Callable] = None,
                    fault: Optional[Callable[[int, int, int], None]] = None,
                    host: str = "127.0.0.1") -> DistributedResult:
    """Train with ``workers`` asynchronous workers against ``shards`` parameter shards.

    ``inproc`` runs workers as threads calling the servers directly; ``tcp``
    runs each worker in its own process talking to loopback TCP servers.
    """
    if workers < 1:
        raise ValueError("need at least one worker")
    if transport not in TRANSPORTS:
        raise ValueError(f"transport must be one of {TRANSPORTS}, got {transport!r}")
    shards = shards or default_shards(workers)
    servers = [ShardServer(i, shards, spec, cfg.seed, cfg.adam) for i in range(shards)]
    tcp = [TcpShardServer(s, host) for s in servers] if transport == "tcp" else []
    endpoints = [t.endpoint for t in tcp]

    def channels():
        if tcp:
            return [TcpChannel(e) for e in endpoints]
        return [InProcChannel(s) for s in servers]

    if tcp:
        ctx = mp.get_context("fork")
        messages = ctx.Queue()
        listeners = [t._server.socket for t in tcp]
        handles = [_ProcessWorker(ctx, _process_main,
                                  (i, workers, g, spec, cfg, sampler_cfg, endpoints, messages, fault, listeners))
                   for i in range(workers)]
    else:
        messages = queue.Queue()
        handles = [_ThreadWorker(worker_loop,
                                 (i, workers, g, spec, cfg, sampler_cfg, PSClient(spec, channels()),
                                  messages.put, fault))
                   for i in range(workers)]
    for h in handles:
        h.start()
    for t in tcp:
        t.start()

    done = threading.Event()

    def monitor():
        while not done.wait(0.02):
            bad = [i for i, h in enumerate(handles) if h.failed()]
            if bad:
                for s in servers:
                    s.abort(f"worker {bad[0]} died")
                return

    watcher = threading.Thread(target=monitor, daemon=True)
    watcher.start()

    writer = CheckpointWriter(os.path.join(out_dir, "checkpoints") if out_dir else None, cfg.keep_checkpoints)
    client = PSClient(spec, channels())
    coord = Coordinator(spec, client, workers, writer)
    result = DistributedResult(None, workers=workers, shards=shards)
    stats: dict = {}
    worker_errors: list = []

    def drain(block_for_epoch: Optional[int] = None):
        deadline = time.monotonic() + 60
        while True:
            have = sum(1 for (e, _) in stats if e == block_for_epoch)
            if block_for_epoch is None or have >= workers:
                try:
                    msg = messages.get_nowait()
                except queue.Empty:
                    return
            else:
                try:
                    msg = messages.get(timeout=0.05)
                except queue.Empty:
                    if any(h.failed() for h in handles) or time.monotonic() > deadline:
                        raise RunAborted(f"statistics for epoch {block_for_epoch} never arrived")
                    continue
            if msg[0] == "stats":
                _, wid, epoch, total, pairs, active = msg
                stats[(epoch, wid)] = (total, pairs, active)
            elif msg[0] == "error":
                worker_errors.append(msg)
            else:
                kind, wid, epoch, t = msg
                result.events.append(Event(t, f"worker{wid}", kind, epoch))

    try:
        coord.register()
        result.store, _ = coord.checkpoint(0)
        for epoch in range(1, cfg.epochs + 1):
            t0, t1 = coord.epoch(epoch)
            drain(epoch)
            parts = [stats[(epoch, w)] for w in range(workers)]
            total = 0.0
            for p in parts:
                total += p[0]
            pairs = sum(p[1] for p in parts)
            report = EpochReport(epoch, total / max(pairs, 1), t1 - t0, sum(p[2] for p in parts))
            result.reports.append(report)
            log.info("epoch %d loss %.6f time %.2fs workers %d", epoch, report.loss, report.seconds, workers)
            result.store, path = coord.checkpoint(epoch)
            if path:
                result.checkpoints.append(path)
            if out_dir:
                write_epoch_csv(os.path.join(out_dir, "epochs.csv"), result.reports)
            if on_epoch is not None:
                on_epoch(report, result.store)
        if out_dir and not result.reports:
            write_epoch_csv(os.path.join(out_dir, "epochs.csv"), result.reports)
    except (ProtocolError, RunAborted) as exc:
        done.set()
        for s in servers:
            s.abort("coordinator stopping")
        for h in handles:
            h.join(5)
        try:
            drain()
        except KGNNError:
            pass
        raise _failure(handles, worker_errors, exc, writer) from None
    finally:
        done.set()
        for h in handles:
            h.join(30)
        drain()
        client.shutdown()
        client.close()
        for t in tcp:
            t.stop()
    result.events.extend(coord.events)
    result.events.sort(key=lambda e: e.time)
    return result


def _failure(handles, worker_errors, exc, writer: CheckpointWriter) -> KGNNError:
    latest = writer.written[-1] if writer.written else None
    if latest:
        log.error("run aborted; last good checkpoint %s", latest)
    for h in handles:
        if isinstance(h.error, TrainingAborted):
            return h.error
    for _, wid, name, message, info in worker_errors:
        if info is not None:
            return TrainingAborted(*info)
    for h in handles:
        if h.error is not None:
            return RunAborted(f"worker failed: {h.error!r}")
    if worker_errors:
        _, wid, name, message, _ = worker_errors[0]
        return RunAborted(f"worker {wid} failed: {name}: {message}")
    return RunAborted(str(exc))


# separately launched processes (``kgnn serve``) ---------------------------------

def serve_coordinator(spec: ModelSpec, cfg: TrainConfig, endpoints, workers: int,
                      out_dir: Optional[str] = None, on_epoch: Optional[Callable] = None) -> DistributedResult:
    """Drive already-running shard servers and workers through ``cfg.epochs`` epochs.

    The workers are separate processes, so their loss totals are not seen
    here; epoch reports carry wall time only (loss is NaN). Shards are
    shut down at the end.
    """
    client = PSClient(spec, [TcpChannel(e) for e in endpoints])
    writer = CheckpointWriter(os.path.join(out_dir, "checkpoints") if out_dir else None, cfg.keep_checkpoints)
    coord = Coordinator(spec, client, workers, writer)
    result = DistributedResult(None, workers=workers, shards=len(endpoints))
    try:
        coord.register()
        result.store, _ = coord.checkpoint(0)
        for epoch in range(1, cfg.epochs + 1):
            t0, t1 = coord.epoch(epoch)
            report = EpochReport(epoch, float("nan"), t1 - t0, 0)
            result.reports.append(report)
            result.store, path = coord.checkpoint(epoch)
            if path:
                result.checkpoints.append(path)
            if out_dir:
                write_epoch_csv(os.path.join(out_dir, "epochs.csv"), result.reports)
            if on_epoch is not None:
                on_epoch(report, result.store)
        if out_dir and not result.reports:
            write_epoch_csv(os.path.join(out_dir, "epochs.csv"), result.reports)
        client.shutdown()
    except ProtocolError as exc:
        raise _failure([], [], exc, writer) from None
    finally:
        client.close()
    result.events = coord.events
    return result


def serve_worker(worker_id: int, workers: int, g: KnowledgeGraph, spec: ModelSpec, cfg: TrainConfig,
                 sampler_cfg: SamplerConfig, endpoints, report: Optional[Callable] = None):
    """One worker process against running shard servers."""
    if not 0 <= worker_id < workers:
        raise ValueError(f"worker id {worker_id} outside [0, {workers})")
    client = PSClient(spec, [TcpChannel(e) for e in endpoints])
    try:
        worker_loop(worker_id, workers, g, spec, cfg, sampler_cfg, client, report or (lambda msg: None))
    finally:
        client.close()
