"""Parameter shard server: owns a slice of the key space and applies Adam in place."""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from typing import Optional

import numpy as np

from ..errors import DimensionError, ProtocolError, VocabLookupError
from ..params import AdamConfig, ModelSpec, ParameterStore, shard_of
from . import protocol as pr

log = logging.getLogger(__name__)

N_STRIPES = 64
BARRIER = struct.Struct("<II")


class ShardServer:
    """Serves PULL/PUSH/BARRIER/CHECKPOINT/SHUTDOWN for keys it owns.

    Every shard initializes the full store from the shared seed so the
    initial values agree with a local run, but it answers only for keys
    whose ``shard_of`` is ``shard_id``. Per-key mutual exclusion uses
    striped locks taken in ascending order, so requests on disjoint
    stripes run concurrently and no two requests deadlock.
    """

    def __init__(self, shard_id: int, num_shards: int, spec: ModelSpec, seed: int,
                 hyper: Optional[AdamConfig] = None, store: Optional[ParameterStore] = None,
                 barrier_timeout: Optional[float] = None):
        if not 0 <= shard_id < num_shards:
            raise ValueError(f"shard id {shard_id} outside [0, {num_shards})")
        self.shard_id = shard_id
        self.num_shards = num_shards
        self.store = store if store is not None else ParameterStore.initialize(spec, seed)
        self.hyper = hyper or AdamConfig()
        self.barrier_timeout = barrier_timeout
        self._stripes = [threading.Lock() for _ in range(N_STRIPES)]
        self._cv = threading.Condition()
        self._arrivals: dict[int, list] = {}
        self._released: set[int] = set()
        self._aborted: Optional[str] = None
        self.stopped = threading.Event()

    # ownership and locking ------------------------------------------------

    def owns(self, kind: int, ids) -> np.ndarray:
        return shard_of(kind, ids, self.num_shards) == self.shard_id

    def owned_rows(self, name: str) -> np.ndarray:
        g = self.store.groups[name]
        ids = g.id_offset + np.arange(g.count)
        return np.flatnonzero(self.owns(int(g.kind), ids))

    def _stripe_ids(self, kind_ids) -> list[int]:
        stripes = set()
        for kind, ids in kind_ids:
            ids = np.asarray(ids, dtype=np.int64)
            stripes.update(((ids * 31 + kind) % N_STRIPES).tolist())
        return sorted(stripes)

    def _lock(self, stripes):
        for s in stripes:
            self._stripes[s].acquire()

    def _unlock(self, stripes):
        for s in reversed(stripes):
            self._stripes[s].release()

    def _resolve(self, kind: int, ids: np.ndarray):
        if not self.owns(kind, ids).all():
            bad = ids[~self.owns(kind, ids)][0]
            raise ProtocolError(pr.ERR_UNKNOWN_KEY, f"key ({kind}, {int(bad)}) not owned by shard {self.shard_id}")
        try:
            return self.store.resolve_many(kind, ids)
        except VocabLookupError as exc:
            raise ProtocolError(pr.ERR_UNKNOWN_KEY, str(exc)) from None

    # request handling ---------------------------------------------------------

    def handle(self, frame: bytes) -> bytes:
        """Process one request frame and return the reply frame."""
        try:
            op, payload = pr.decode_frame(frame)
            if self._aborted is not None and op in (pr.OP_PULL, pr.OP_PUSH, pr.OP_BARRIER):
                raise ProtocolError(pr.ERR_ABORTED, self._aborted)
            if op == pr.OP_PULL:
                return pr.encode_frame(pr.OP_PULL, self._pull(payload))
            if op == pr.OP_PUSH:
                return pr.encode_frame(pr.OP_PUSH, self._push(payload))
            if op == pr.OP_BARRIER:
                return pr.encode_frame(pr.OP_BARRIER, self._barrier(payload))
            if op == pr.OP_CHECKPOINT:
                if payload:
                    raise ProtocolError(pr.ERR_MALFORMED, "CHECKPOINT takes no payload")
                return pr.encode_frame(pr.OP_CHECKPOINT, self._checkpoint())
            if op == pr.OP_SHUTDOWN:
                self.stopped.set()
                return pr.encode_frame(pr.OP_SHUTDOWN)
            raise ProtocolError(pr.ERR_MALFORMED, f"unknown opcode 0x{op:02x}")
        except ProtocolError as exc:
            return pr.error_frame(exc.code, exc.message)
        except (struct.error, ValueError) as exc:
            return pr.error_frame(pr.ERR_MALFORMED, str(exc))

    def _pull(self, payload: bytes) -> bytes:
        kinds, ids = pr.decode_keys(payload)
        # split into segments of one group with contiguous request positions,
        # then emit them in request order
        cuts = np.flatnonzero(np.diff(kinds)) + 1
        plans = []
        for a, b in zip(np.r_[0, cuts], np.r_[cuts, len(kinds)]):
            if b <= a:
                continue
            kind = int(kinds[a])
            for name, pos, rows in self._resolve(kind, ids[a:b]):
                breaks = np.flatnonzero(np.diff(pos) != 1) + 1
                for p, r in zip(np.split(pos, breaks), np.split(rows, breaks)):
                    plans.append((a + int(p[0]), kind, ids[a + p], name, r))
        plans.sort(key=lambda x: x[0])
        stripes = self._stripe_ids([(k, i) for _, k, i, _, _ in plans])
        self._lock(stripes)
        try:
            blocks = [pr.RecordBlock(kind, key_ids, self.store.values[name][rows].copy())
                      for _, kind, key_ids, name, rows in plans]
        finally:
            self._unlock(stripes)
        return pr.encode_records(blocks)

    def _push(self, payload: bytes) -> bytes:
        blocks, end = pr.decode_records(payload)
        if end != len(payload):
            raise ProtocolError(pr.ERR_MALFORMED, "trailing bytes after PUSH records")
        grads: dict[str, list] = {}
        touched = []
        for b in blocks:
            for name, pos, rows in self._resolve(b.kind, b.ids):
                g = self.store.groups[name]
                if b.values.shape[1] != g.size:
                    raise ProtocolError(pr.ERR_SHAPE, f"{name}: got {b.values.shape[1]} values per key, expected {g.size}")
                grads.setdefault(name, []).append((rows, b.values[pos].reshape((len(pos),) + g.shape)))
            touched.append((b.kind, b.ids))
        merged = {}
        for name, parts in grads.items():
            rows = np.concatenate([r for r, _ in parts])
            if len(np.unique(rows)) != len(rows):
                raise ProtocolError(pr.ERR_MALFORMED, f"duplicate keys for {name} in one PUSH")
            merged[name] = (rows, np.concatenate([v for _, v in parts]))
        stripes = self._stripe_ids(touched)
        self._lock(stripes)
        try:
            for name, (rows, grad) in merged.items():
                try:
                    self.store.adam_update(name, rows, grad, self.hyper)
                except DimensionError as exc:
                    raise ProtocolError(pr.ERR_SHAPE, str(exc)) from None
        finally:
            self._unlock(stripes)
        return struct.pack("<I", sum(len(r) for r, _ in merged.values()))

    def _barrier(self, payload: bytes) -> bytes:
        if len(payload) != BARRIER.size:
            raise ProtocolError(pr.ERR_MALFORMED, "BARRIER payload must be 8 bytes")
        bid, parties = BARRIER.unpack(payload)
        if parties < 1:
            raise ProtocolError(pr.ERR_MALFORMED, "barrier needs at least one party")
        with self._cv:
            entry = self._arrivals.setdefault(bid, [0, parties])
            if entry[1] != parties:
                raise ProtocolError(pr.ERR_MALFORMED, f"barrier {bid} declared with {entry[1]} and {parties} parties")
            entry[0] += 1
            if entry[0] >= parties:
                self._released.add(bid)
                self._cv.notify_all()
            else:
                ok = self._cv.wait_for(lambda: bid in self._released or self._aborted is not None,
                                       timeout=self.barrier_timeout)
                if not ok:
                    self._abort_locked(f"barrier {bid} timed out")
            if bid not in self._released:
                raise ProtocolError(pr.ERR_ABORTED, self._aborted or "aborted")
        return payload

    def _checkpoint(self) -> bytes:
        self._lock(list(range(N_STRIPES)))
        try:
            blocks = []
            for g in pr.sorted_groups(self.store.groups.values()):
                rows = self.owned_rows(g.name)
                if len(rows):
                    blocks.append(pr.RecordBlock(int(g.kind), g.id_offset + rows, self.store.values[g.name][rows]))
            return pr.encode_records(blocks)
        finally:
            self._unlock(list(range(N_STRIPES)))

    def abort(self, reason: str = "run aborted"):
        """Fail every pending and future barrier, pull and push."""
        with self._cv:
            self._abort_locked(reason)

    def _abort_locked(self, reason):
        if self._aborted is None:
            self._aborted = reason
            log.error("shard %d aborting: %s", self.shard_id, reason)
        self._cv.notify_all()

    @property
    def aborted(self) -> Optional[str]:
        return self._aborted


# TCP transport --------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        shard: ShardServer = self.server.shard
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                frame = pr.read_frame(sock)
            except (ConnectionError, OSError):
                return
            except ProtocolError as exc:
                sock.sendall(pr.error_frame(exc.code, exc.message))
                return
            reply = shard.handle(frame)
            try:
                sock.sendall(reply)
            except OSError:
                return
            if shard.stopped.is_set():
                threading.Thread(target=self.server.shutdown, daemon=True).start()
                return


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class TcpShardServer:
    """Runs a :class:`ShardServer` behind a threaded TCP listener."""

    def __init__(self, shard: ShardServer, host: str = "127.0.0.1", port: int = 0):
        self.shard = shard
        self._server = _TCPServer((host, port), _Handler)
        self._server.shard = shard
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    def start(self) -> "TcpShardServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True,
                                        name=f"shard-{self.shard.shard_id}")
        self._thread.start()
        return self

    def serve_forever(self):
        self._server.serve_forever()

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
