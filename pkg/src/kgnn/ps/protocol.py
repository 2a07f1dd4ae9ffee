"""Binary wire format shared by the TCP transport, in-process channels and checkpoints.

All integers are little-endian.

* frame: ``[u32 payload_len][u8 opcode][payload]``
* key: ``[u8 kind][u64 id]``
* key list (PULL request): ``[u32 n][n x key]``
* record list (PULL reply, PUSH request, CHECKPOINT reply):
  ``[u32 n][n x (key, u32 dim, dim x f64)]`` where ``dim`` is the flattened size
* BARRIER request and reply: ``[u32 barrier_id][u32 parties]``
* PUSH reply: ``[u32 n_applied]``; SHUTDOWN request and reply: empty
* ERROR: ``[u8 code][utf-8 message]``

Checkpoint file: ``b"KGNN"``, ``u32 version``, a dim table
``[u32 n][n x (u8 kind, u64 id_offset, u32 count, u32 ndim, ndim x u32)]``
describing every parameter group, then a record list sorted by key.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import CheckpointError, ProtocolError

OP_PULL = 0x01
OP_PUSH = 0x02
OP_BARRIER = 0x03
OP_CHECKPOINT = 0x04
OP_SHUTDOWN = 0x05
OP_ERROR = 0x7F
OPCODES = {OP_PULL, OP_PUSH, OP_BARRIER, OP_CHECKPOINT, OP_SHUTDOWN, OP_ERROR}

ERR_UNKNOWN_KEY = 0x01
ERR_SHAPE = 0x02
ERR_MALFORMED = 0x03
ERR_ABORTED = 0x04

HEADER = struct.Struct("<IB")
KEY_DTYPE = np.dtype([("kind", "u1"), ("id", "<u8")])
MAX_PAYLOAD = 1 << 31

CHECKPOINT_MAGIC = b"KGNN"
CHECKPOINT_VERSION = 1


def encode_frame(opcode: int, payload: bytes = b"") -> bytes:
    return HEADER.pack(len(payload), opcode) + payload


def decode_frame(data: bytes) -> tuple[int, bytes]:
    if len(data) < HEADER.size:
        raise ProtocolError(ERR_MALFORMED, "truncated frame header")
    n, op = HEADER.unpack_from(data)
    if len(data) != HEADER.size + n:
        raise ProtocolError(ERR_MALFORMED, f"frame length {len(data) - HEADER.size} != declared {n}")
    return op, bytes(data[HEADER.size:])


def split_frames(stream: bytes) -> list[bytes]:
    """Cut a concatenation of frames into individual frames."""
    out, off = [], 0
    while off < len(stream):
        n, _ = HEADER.unpack_from(stream, off)
        end = off + HEADER.size + n
        if end > len(stream):
            raise ProtocolError(ERR_MALFORMED, "truncated frame in stream")
        out.append(bytes(stream[off:end]))
        off = end
    return out


def recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock) -> bytes:
    head = recv_exact(sock, HEADER.size)
    n, _ = HEADER.unpack(head)
    if n > MAX_PAYLOAD:
        raise ProtocolError(ERR_MALFORMED, f"payload of {n} bytes exceeds limit")
    return head + recv_exact(sock, n)


def error_frame(code: int, message: str) -> bytes:
    return encode_frame(OP_ERROR, struct.pack("<B", code) + message.encode("utf-8"))


def raise_if_error(frame: bytes) -> tuple[int, bytes]:
    op, payload = decode_frame(frame)
    if op == OP_ERROR:
        code = payload[0] if payload else ERR_MALFORMED
        raise ProtocolError(code, payload[1:].decode("utf-8", "replace"))
    return op, payload


# keys -----------------------------------------------------------------------

def encode_keys(kinds, ids) -> bytes:
    ids = np.asarray(ids, dtype=np.uint64).ravel()
    kinds = np.broadcast_to(np.asarray(kinds, dtype=np.uint8), ids.shape)
    arr = np.empty(len(ids), KEY_DTYPE)
    arr["kind"] = kinds
    arr["id"] = ids
    return struct.pack("<I", len(ids)) + arr.tobytes()


def decode_keys(payload: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(payload) < 4:
        raise ProtocolError(ERR_MALFORMED, "key list shorter than its count")
    (n,) = struct.unpack_from("<I", payload)
    if len(payload) != 4 + n * KEY_DTYPE.itemsize:
        raise ProtocolError(ERR_MALFORMED, f"key list of {n} keys has {len(payload) - 4} bytes")
    arr = np.frombuffer(payload, KEY_DTYPE, count=n, offset=4)
    return arr["kind"].astype(np.int64), arr["id"].astype(np.int64)


# records --------------------------------------------------------------------

@dataclass
class RecordBlock:
    """Records sharing one kind and one flattened size."""

    kind: int
    ids: np.ndarray
    values: np.ndarray  # (n, dim)


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("kind", "u1"), ("id", "<u8"), ("dim", "<u4"), ("val", "<f8", (dim,))])


def encode_record_body(blocks) -> tuple[int, bytes]:
    parts = []
    total = 0
    for b in blocks:
        vals = np.asarray(b.values, dtype=np.float64)
        n = len(b.ids)
        vals = vals.reshape(n, -1)
        dim = vals.shape[1]
        arr = np.empty(n, _record_dtype(dim))
        arr["kind"] = b.kind
        arr["id"] = np.asarray(b.ids, dtype=np.uint64)
        arr["dim"] = dim
        arr["val"] = vals
        parts.append(arr.tobytes())
        total += n
    return total, b"".join(parts)


def encode_records(blocks) -> bytes:
    n, body = encode_record_body(blocks)
    return struct.pack("<I", n) + body


def decode_records(payload: bytes, offset: int = 0) -> tuple[list[RecordBlock], int]:
    """Parse a record list starting at ``offset``; returns blocks and the end offset."""
    view = memoryview(payload)
    if len(view) < offset + 4:
        raise ProtocolError(ERR_MALFORMED, "record list shorter than its count")
    (n,) = struct.unpack_from("<I", view, offset)
    off = offset + 4
    blocks: list[RecordBlock] = []
    done = 0
    while done < n:
        if len(view) < off + 13:
            raise ProtocolError(ERR_MALFORMED, "truncated record header")
        kind, _, dim = struct.unpack_from("<BQI", view, off)
        dt = _record_dtype(dim)
        avail = (len(view) - off) // dt.itemsize
        if avail == 0:
            raise ProtocolError(ERR_MALFORMED, "truncated record body")
        run = np.frombuffer(view, dt, count=min(avail, n - done), offset=off)
        same = (run["dim"] == dim) & (run["kind"] == kind)
        k = len(run) if same.all() else int(np.argmin(same))
        run = run[:k]
        blocks.append(RecordBlock(int(kind), run["id"].astype(np.int64), np.array(run["val"]).reshape(k, dim)))
        off += k * dt.itemsize
        done += k
    return blocks, off


# checkpoints ----------------------------------------------------------------

def encode_dim_table(groups) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(groups)))
    for g in groups:
        buf.write(struct.pack("<BQII", int(g.kind), g.id_offset, g.count, len(g.shape)))
        buf.write(struct.pack(f"<{len(g.shape)}I", *g.shape))
    return buf.getvalue()


def decode_dim_table(data, off: int):
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    table = []
    for _ in range(n):
        kind, offset, count, ndim = struct.unpack_from("<BQII", data, off)
        off += 17
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        table.append((kind, offset, count, tuple(shape)))
    return table, off


def sorted_groups(groups):
    return sorted(groups, key=lambda g: (int(g.kind), g.id_offset))


def checkpoint_bytes(groups, record_body: bytes, n_records: int) -> bytes:
    return (CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
            + encode_dim_table(sorted_groups(groups))
            + struct.pack("<I", n_records) + record_body)


def store_checkpoint_bytes(store) -> bytes:
    """Serialize every parameter of a :class:`ParameterStore` in key order."""
    groups = sorted_groups(store.groups.values())
    blocks = [RecordBlock(int(g.kind), g.id_offset + np.arange(g.count), store.values[g.name])
              for g in groups]
    n, body = encode_record_body(blocks)
    return checkpoint_bytes(groups, body, n)


def read_checkpoint(data: bytes):
    """Returns ``(dim_table, blocks)``; raises :class:`CheckpointError` on a bad header."""
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        table, off = decode_dim_table(data, 8)
        blocks, end = decode_records(data, off)
    except (struct.error, ProtocolError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if end != len(data):
        raise CheckpointError("trailing bytes after checkpoint records")
    return table, blocks


def load_checkpoint_into(store, data: bytes):
    table, blocks = read_checkpoint(data)
    expected = [(int(g.kind), g.id_offset, g.count, tuple(g.shape)) for g in sorted_groups(store.groups.values())]
    if table != expected:
        raise CheckpointError("checkpoint parameter layout does not match the model config")
    for b in blocks:
        for name, pos, rows in store.resolve_many(b.kind, b.ids):
            g = store.groups[name]
            store.values[name][rows] = b.values[pos].reshape((len(pos),) + g.shape)
    return store
