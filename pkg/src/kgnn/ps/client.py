"""Worker-side access to a sharded parameter server."""

from __future__ import annotations

import logging
import socket
import struct
import time
from typing import Optional, Sequence

import numpy as np

from ..errors import ProtocolError
from ..params import KeySpace, ModelSpec, layout, shard_of
from . import protocol as pr

log = logging.getLogger(__name__)

RETRIES = 5
BACKOFF = 0.05


class InProcChannel:
    """Hands frames straight to a server object in the same process."""

    def __init__(self, server):
        self.server = server

    def request(self, frame: bytes) -> bytes:
        return self.server.handle(frame)

    def close(self):
        pass


class RecordingChannel:
    """Wraps a channel and keeps every ``(request, reply)`` pair."""

    def __init__(self, inner):
        self.inner = inner
        self.log: list[tuple[bytes, bytes]] = []

    def request(self, frame: bytes) -> bytes:
        reply = self.inner.request(frame)
        self.log.append((frame, reply))
        return reply

    def close(self):
        self.inner.close()


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {endpoint!r}")
    return host, int(port)


class TcpChannel:
    """One persistent connection to a shard.

    Connecting retries ``retries`` times with exponential backoff. Requests
    that are safe to repeat (PULL, CHECKPOINT) are resent once on a fresh
    connection after a transport failure; others fail immediately since the
    server may already have applied them.
    """

    def __init__(self, endpoint: str, retries: int = RETRIES, backoff: float = BACKOFF):
        self.address = parse_endpoint(endpoint)
        self.retries = retries
        self.backoff = backoff
        self._sock: Optional[socket.socket] = None

    def _connect(self):
        delay = self.backoff
        last = None
        for attempt in range(self.retries):
            try:
                sock = socket.create_connection(self.address, timeout=None)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._sock = sock
                return
            except OSError as exc:
                last = exc
                log.warning("connect to %s:%d failed (attempt %d): %s", *self.address, attempt + 1, exc)
                if attempt + 1 < self.retries:
                    time.sleep(delay)
                    delay *= 2
        raise ConnectionError(f"server {self.address[0]}:{self.address[1]} unreachable after "
                              f"{self.retries} attempts: {last}")

    def request(self, frame: bytes) -> bytes:
        op = frame[4]
        for attempt in (0, 1):
            if self._sock is None:
                self._connect()
            try:
                self._sock.sendall(frame)
                return pr.read_frame(self._sock)
            except OSError:
                self.close()
                if attempt or op not in (pr.OP_PULL, pr.OP_CHECKPOINT):
                    raise
        raise AssertionError("unreachable")

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None


class PSClient:
    """Pull/push parameter rows by group name across ``len(channels)`` shards.

    Implements the same ``pull``/``push`` interface as
    :class:`kgnn.params.LocalAccess`.
    """

    def __init__(self, spec: ModelSpec, channels: Sequence):
        if not channels:
            raise ValueError("need at least one shard channel")
        self.spec = spec
        self.channels = list(channels)
        self.keyspace = KeySpace(layout(spec))
        self.groups = self.keyspace.groups

    @property
    def num_shards(self) -> int:
        return len(self.channels)

    def _call(self, shard: int, op: int, payload: bytes = b"") -> bytes:
        reply = self.channels[shard].request(pr.encode_frame(op, payload))
        rop, body = pr.raise_if_error(reply)
        if rop != op:
            raise ProtocolError(pr.ERR_MALFORMED, f"reply opcode 0x{rop:02x} to request 0x{op:02x}")
        return body

    def _split(self, name: str, rows: np.ndarray):
        g = self.groups[name]
        ids = g.id_offset + rows
        return int(g.kind), ids, shard_of(int(g.kind), ids, self.num_shards)

    def pull(self, request: dict) -> dict:
        per_shard: dict[int, list] = {}
        out = {}
        filled = {}
        for name, rows in request.items():
            g = self.groups[name]
            rows = np.unique(np.asarray(rows, dtype=np.int64))
            out[name] = (rows, np.empty((len(rows),) + g.shape))
            filled[name] = np.zeros(len(rows), bool)
            kind, ids, shards = self._split(name, rows)
            for s in np.unique(shards).tolist():
                per_shard.setdefault(s, []).append((kind, ids[shards == s]))
        for s, parts in sorted(per_shard.items()):
            kinds = np.concatenate([np.full(len(i), k) for k, i in parts])
            ids = np.concatenate([i for _, i in parts])
            body = self._call(s, pr.OP_PULL, pr.encode_keys(kinds, ids))
            blocks, end = pr.decode_records(body)
            if end != len(body):
                raise ProtocolError(pr.ERR_MALFORMED, "trailing bytes in PULL reply")
            for b in blocks:
                for name, pos, grow in self.keyspace.resolve_many(b.kind, b.ids):
                    rows, vals = out[name]
                    at = np.searchsorted(rows, grow)
                    vals[at] = b.values[pos].reshape((len(pos),) + self.groups[name].shape)
                    filled[name][at] = True
        for name, mask in filled.items():
            if not mask.all():
                raise ProtocolError(pr.ERR_MALFORMED, f"PULL reply missing {int((~mask).sum())} {name} keys")
        return out

    def push(self, grads) -> int:
        per_shard: dict[int, list] = {}
        for name, (rows, vals) in grads.blocks.items():
            kind, ids, shards = self._split(name, np.asarray(rows, np.int64))
            flat = np.asarray(vals, dtype=np.float64).reshape(len(ids), -1)
            for s in np.unique(shards).tolist():
                sel = shards == s
                per_shard.setdefault(s, []).append(pr.RecordBlock(kind, ids[sel], flat[sel]))
        applied = 0
        for s, blocks in sorted(per_shard.items()):
            body = self._call(s, pr.OP_PUSH, pr.encode_records(blocks))
            applied += struct.unpack("<I", body)[0]
        return applied

    def barrier(self, barrier_id: int, parties: int, shard: int = 0):
        self._call(shard, pr.OP_BARRIER, struct.pack("<II", barrier_id, parties))

    def checkpoint_records(self) -> list[pr.RecordBlock]:
        blocks = []
        for s in range(self.num_shards):
            body = self._call(s, pr.OP_CHECKPOINT)
            got, end = pr.decode_records(body)
            if end != len(body):
                raise ProtocolError(pr.ERR_MALFORMED, "trailing bytes in CHECKPOINT reply")
            blocks.extend(got)
        return blocks

    def shutdown(self):
        for s in range(self.num_shards):
            try:
                self._call(s, pr.OP_SHUTDOWN)
            except (OSError, ProtocolError) as exc:
                log.debug("shutdown of shard %d: %s", s, exc)

    def close(self):
        for ch in self.channels:
            ch.close()
