"""Parameter layout, storage and the sparse Adam update.

Every trainable tensor is addressed by a key ``(kind, id)``. Keys of one
kind with a common shape are grouped so they can be stored, pulled and
updated as rows of a single array. A :class:`ParamGroup` maps its rows to
ids ``id_offset + row``.
"""

from __future__ import annotations

import enum
import logging
import zlib
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError, VocabLookupError

log = logging.getLogger(__name__)


class ParamKind(enum.IntEnum):
    ENTITY_EMB = 0
    RELATION_EMB = 1
    HYPERPLANE = 2
    PROJ_MATRIX = 3
    ATTN_WEIGHT = 4
    LSTM_WEIGHT = 5
    ATTR_PROJ = 6
    ATTN_RELATION = 7


class DecoderKind(str, enum.Enum):
    TRANSE = "TransE"
    TRANSH = "TransH"
    TRANSR = "TransR"
    DISTMULT = "DistMult"

    @classmethod
    def parse(cls, value) -> "DecoderKind":
        if isinstance(value, cls):
            return value
        for k in cls:
            if k.value.lower() == str(value).lower():
                return k
        raise ConfigError("train.decoder", f"unknown decoder {value!r}")

    @property
    def translational(self) -> bool:
        return self is not DecoderKind.DISTMULT


@dataclass(frozen=True)
class ParamGroup:
    name: str
    kind: ParamKind
    id_offset: int
    count: int
    shape: tuple
    init: str

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass(frozen=True)
class ModelSpec:
    """Everything that fixes the set of parameters and their shapes."""

    n_entities: int
    n_relations: int
    dim: int = 64
    encoder: str = "gnn"
    decoder: DecoderKind = DecoderKind.TRANSH
    hops: int = 2
    attention_hidden: int = 32
    use_attributes: bool = False
    attr_dim: int = 0
    inverse_edges: bool = True
    leaky_slope: float = 0.2
    norm: str = "L2"
    share_relations: bool = False
    strict: bool = False

    def __post_init__(self):
        object.__setattr__(self, "decoder", DecoderKind.parse(self.decoder))
        if self.encoder not in ("gnn", "lookup"):
            raise ConfigError("train.encoder", f"expected gnn or lookup, got {self.encoder!r}")
        if self.dim <= 0:
            raise ConfigError("encoder.dim", "must be positive")
        if self.encoder == "gnn" and self.hops < 1:
            raise ConfigError("encoder.hops", "K must be >= 1 for the gnn encoder")
        if self.norm not in ("L1", "L2"):
            raise ConfigError("train.norm", f"expected L1 or L2, got {self.norm!r}")

    @property
    def attributes_on(self) -> bool:
        return self.use_attributes and self.attr_dim > 0

    @property
    def attn_relation_rows(self) -> int:
        return 2 * self.n_relations if self.inverse_edges else self.n_relations

    @property
    def attn_relation_group(self) -> str:
        return "relation" if self.share_relations else "attn_relation"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder"] = self.decoder.value
        return d


def layout(spec: ModelSpec) -> list[ParamGroup]:
    d = spec.dim
    R = spec.n_relations
    groups = []
    if not spec.attributes_on:
        groups.append(ParamGroup("entity", ParamKind.ENTITY_EMB, 0, spec.n_entities, (d,), "uniform"))
    rel_rows = R
    if spec.encoder == "gnn" and spec.share_relations:
        rel_rows = spec.attn_relation_rows
    groups.append(ParamGroup("relation", ParamKind.RELATION_EMB, 0, rel_rows, (d,), "uniform"))
    if spec.decoder is DecoderKind.TRANSH:
        groups.append(ParamGroup("hyperplane", ParamKind.HYPERPLANE, 0, R, (d,), "unit"))
    elif spec.decoder is DecoderKind.TRANSR:
        groups.append(ParamGroup("proj", ParamKind.PROJ_MATRIX, 0, R, (d, d), "identity"))
    if spec.encoder == "gnn":
        h = spec.attention_hidden
        if not spec.share_relations:
            groups.append(ParamGroup("attn_relation", ParamKind.ATTN_RELATION, 0,
                                     spec.attn_relation_rows, (d,), "uniform"))
        groups.append(ParamGroup("attn_W", ParamKind.ATTN_WEIGHT, 0, 1, (h, 3 * d), "glorot"))
        groups.append(ParamGroup("attn_u", ParamKind.ATTN_WEIGHT, 1, 1, (h,), "glorot"))
        groups.append(ParamGroup("lstm_W", ParamKind.LSTM_WEIGHT, 0, 1, (4 * d, 2 * d), "lstm"))
        groups.append(ParamGroup("lstm_b", ParamKind.LSTM_WEIGHT, 1, 1, (4 * d,), "zeros"))
    if spec.attributes_on:
        groups.append(ParamGroup("attr_proj", ParamKind.ATTR_PROJ, 0, 1, (d, spec.attr_dim), "uniform"))
    return groups


def _init_group(group: ParamGroup, dim: int, rng: np.random.Generator) -> np.ndarray:
    shape = (group.count,) + group.shape
    if group.init == "uniform":
        bound = 6.0 / np.sqrt(dim)
        return rng.uniform(-bound, bound, size=shape)
    if group.init == "unit":
        x = rng.uniform(-1.0, 1.0, size=shape)
        return x / np.linalg.norm(x, axis=-1, keepdims=True)
    if group.init == "identity":
        return np.broadcast_to(np.eye(group.shape[0]), shape).copy()
    if group.init == "glorot":
        fan_out = group.shape[0]
        fan_in = group.shape[1] if len(group.shape) > 1 else 1
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    if group.init == "lstm":
        bound = 1.0 / np.sqrt(dim)
        return rng.uniform(-bound, bound, size=shape)
    if group.init == "zeros":
        return np.zeros(shape)
    raise ValueError(f"unknown init {group.init!r}")


# Stable per-kind hash for shard assignment.
KIND_HASH = {k: zlib.crc32(k.name.encode("ascii")) for k in ParamKind}


def shard_of(kind: int, ids, num_shards: int):
    """Shard owning keys ``(kind, ids)``: ``(hash(kind) xor id) mod num_shards``."""
    h = np.uint64(KIND_HASH[ParamKind(kind)])
    ids = np.asarray(ids, dtype=np.uint64)
    return ((ids ^ h) % np.uint64(num_shards)).astype(np.int64)


@dataclass
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class KeySpace:
    """Maps keys ``(kind, id)`` to ``(group, row)`` for a fixed layout."""

    def __init__(self, groups):
        self.groups = {g.name: g for g in groups}
        self._by_kind: dict[int, list[ParamGroup]] = {}
        for g in self.groups.values():
            self._by_kind.setdefault(int(g.kind), []).append(g)

    def resolve(self, kind: int, ident: int) -> tuple[str, int]:
        """Group name and row for key ``(kind, id)``."""
        for g in self._by_kind.get(int(kind), ()):
            if g.id_offset <= ident < g.id_offset + g.count:
                return g.name, ident - g.id_offset
        raise VocabLookupError(f"unknown parameter key ({int(kind)}, {ident})")

    def resolve_many(self, kind: int, ids: np.ndarray) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """Split ids of one kind into ``(group, positions, rows)`` triples."""
        ids = np.asarray(ids, dtype=np.int64)
        out = []
        covered = np.zeros(len(ids), bool)
        for g in self._by_kind.get(int(kind), ()):
            hit = (ids >= g.id_offset) & (ids < g.id_offset + g.count)
            if hit.any():
                pos = np.flatnonzero(hit)
                out.append((g.name, pos, ids[pos] - g.id_offset))
                covered |= hit
        if not covered.all():
            bad = int(ids[~covered][0])
            raise VocabLookupError(f"unknown parameter key ({int(kind)}, {bad})")
        return out


class ParameterStore:
    """Dense in-memory arrays, one per :class:`ParamGroup`.

    ``adam`` holds per-row first/second moments and a per-row step counter
    that advances only when that row receives a gradient.
    """

    def __init__(self, spec: ModelSpec, values: Optional[dict] = None):
        self.spec = spec
        self.keyspace = KeySpace(layout(spec))
        self.groups = self.keyspace.groups
        if values is None:
            values = {g.name: np.zeros((g.count,) + g.shape) for g in self.groups.values()}
        self.values = values
        self.m = {n: np.zeros_like(v) for n, v in values.items()}
        self.v = {n: np.zeros_like(v) for n, v in values.items()}
        self.t = {n: np.zeros(len(v), np.int64) for n, v in values.items()}

    @classmethod
    def initialize(cls, spec: ModelSpec, seed: int) -> "ParameterStore":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0xA11C,))))
        values = {g.name: _init_group(g, spec.dim, rng) for g in layout(spec)}
        store = cls(spec, values)
        apply_constraints(store)
        return store

    def copy(self) -> "ParameterStore":
        out = ParameterStore(self.spec, {n: v.copy() for n, v in self.values.items()})
        for name in self.values:
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
            out.t[name] = self.t[name].copy()
        return out

    def group(self, name: str) -> ParamGroup:
        return self.groups[name]

    def resolve(self, kind: int, ident: int) -> tuple[str, int]:
        return self.keyspace.resolve(kind, ident)

    def resolve_many(self, kind: int, ids: np.ndarray) -> list[tuple[str, np.ndarray, np.ndarray]]:
        return self.keyspace.resolve_many(kind, ids)

    def keys(self):
        for g in self.groups.values():
            for r in range(g.count):
                yield (int(g.kind), g.id_offset + r)

    def get(self, name: str, rows) -> np.ndarray:
        return self.values[name][np.asarray(rows, dtype=np.int64)]

    def full_view(self):
        return {n: (np.arange(len(v)), v) for n, v in self.values.items()}

    def pull(self, request: dict) -> dict:
        """``{group: rows}`` -> ``{group: (rows, values)}`` (values copied)."""
        return {n: (np.asarray(r, np.int64), self.values[n][np.asarray(r, np.int64)].copy())
                for n, r in request.items()}

    def adam_update(self, name: str, rows: np.ndarray, grad: np.ndarray, hyper: AdamConfig):
        rows = np.asarray(rows, dtype=np.int64)
        grad = np.asarray(grad, dtype=np.float64)
        vals = self.values[name]
        if grad.shape != (len(rows),) + vals.shape[1:]:
            raise DimensionError(
                f"gradient for {name} has shape {grad.shape}, expected {(len(rows),) + vals.shape[1:]}")
        adam_apply(vals, self.m[name], self.v[name], self.t[name], rows, grad, hyper)
        apply_constraints(self, {name: rows})


def adam_apply(values, m, v, t, rows, grad, hyper: AdamConfig):
    """In-place bias-corrected Adam on ``rows`` with a per-row step counter."""
    if len(np.unique(rows)) != len(rows):
        raise DimensionError("duplicate rows in one Adam update")
    t[rows] += 1
    step = t[rows].astype(np.float64).reshape((-1,) + (1,) * (grad.ndim - 1))
    m_new = hyper.beta1 * m[rows] + (1.0 - hyper.beta1) * grad
    v_new = hyper.beta2 * v[rows] + (1.0 - hyper.beta2) * grad * grad
    m[rows] = m_new
    v[rows] = v_new
    m_hat = m_new / (1.0 - hyper.beta1 ** step)
    v_hat = v_new / (1.0 - hyper.beta2 ** step)
    values[rows] = values[rows] - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return values[rows]


def _reinit_row(name, row, dim):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0xDEAD, spawn_key=(row,))))
    x = rng.uniform(-1.0, 1.0, size=dim)
    log.warning("zero-norm %s row %d reinitialized", name, row)
    return x / np.linalg.norm(x)


def renormalize_rows(values: np.ndarray, rows=None, name="hyperplane"):
    rows = np.arange(len(values)) if rows is None else np.asarray(rows, np.int64)
    if len(rows) == 0:
        return
    block = values[rows]
    norms = np.linalg.norm(block, axis=-1)
    zero = norms == 0
    block = block / np.where(zero, 1.0, norms)[:, None]
    for i in np.flatnonzero(zero):
        block[i] = _reinit_row(name, int(rows[i]), values.shape[-1])
    values[rows] = block


def clip_rows(values: np.ndarray, rows=None, max_norm=1.0):
    rows = np.arange(len(values)) if rows is None else np.asarray(rows, np.int64)
    if len(rows) == 0:
        return
    block = values[rows]
    norms = np.linalg.norm(block, axis=-1)
    over = norms > max_norm
    if over.any():
        block[over] = block[over] / norms[over, None] * max_norm
        values[rows] = block


def apply_constraints(store: "ParameterStore", touched: Optional[dict] = None):
    """Unit-normalize TransH normals; clip entity rows in lookup mode.

    ``touched`` restricts the work to ``{group: rows}``; ``None`` means all rows.
    """
    spec = store.spec

    def rows_for(name):
        if touched is None:
            return None
        return touched.get(name, np.zeros(0, np.int64))

    if "hyperplane" in store.values:
        renormalize_rows(store.values["hyperplane"], rows_for("hyperplane"))
    if spec.encoder == "lookup" and spec.decoder.translational and "entity" in store.values:
        clip_rows(store.values["entity"], rows_for("entity"))


post_step_constraints = apply_constraints


class LocalAccess:
    """Parameter access backed by an in-process store; updates apply immediately."""

    def __init__(self, store: ParameterStore, hyper: AdamConfig):
        self.store = store
        self.hyper = hyper

    def pull(self, request: dict) -> dict:
        return self.store.pull(request)

    def push(self, grads) -> None:
        for name, (rows, vals) in grads.blocks.items():
            self.store.adam_update(name, rows, vals, self.hyper)
