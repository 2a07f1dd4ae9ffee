"""In-memory knowledge graph storage.

Triples are kept as ``(n, 3)`` int64 arrays of ``(head, relation, tail)``
ids. Adjacency is a CSR layout sorted per entity by
``(relation, neighbor, direction)`` so every traversal is deterministic.
"""

from __future__ import annotations

import enum
import io
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .errors import DimensionError, ParseError, VocabLookupError, ContractError

log = logging.getLogger(__name__)

_CACHE_MAGIC = b"KGNG"
_CACHE_VERSION = 1


class Direction(enum.IntEnum):
    OUTGOING = 0
    INCOMING = 1


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class NeighborEntry(NamedTuple):
    relation: int
    neighbor: int
    direction: Direction


class Vocab:
    """Bijection between symbol names and dense ids ``0..n-1``."""

    def __init__(self, names: Iterable[str] = (), frozen: bool = False):
        self._names: list[str] = []
        self._index: dict[str, int] = {}
        for name in names:
            self.add(name)
        self.frozen = frozen

    def __len__(self):
        return len(self._names)

    def __contains__(self, name):
        return name in self._index

    def __eq__(self, other):
        return isinstance(other, Vocab) and self._names == other._names

    def __repr__(self):
        return f"Vocab(n={len(self)}, frozen={self.frozen})"

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def add(self, name: str) -> int:
        idx = self._index.get(name)
        if idx is not None:
            return idx
        if getattr(self, "frozen", False):
            raise VocabLookupError(f"unknown symbol {name!r} under a frozen vocabulary")
        idx = len(self._names)
        self._names.append(name)
        self._index[name] = idx
        return idx

    def id(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise VocabLookupError(f"unknown symbol {name!r}") from None

    def name(self, idx: int) -> str:
        if not 0 <= idx < len(self._names):
            raise VocabLookupError(f"id {idx} out of range [0, {len(self._names)})")
        return self._names[idx]

    def lookup(self, name: str) -> int:
        """Id for ``name``; extends the vocabulary unless frozen."""
        return self.add(name)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, name in enumerate(self._names):
                fh.write(f"{name}\t{i}\n")

    @classmethod
    def load(cls, path, frozen=True) -> "Vocab":
        """Read a ``name<TAB>id`` mapping file.

        A leading line holding only an integer (the OpenKE count header) is
        skipped. Ids must be dense in ``[0, n)``.
        """
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.rstrip("\n\r")
                if not line.strip():
                    continue
                parts = line.split("\t") if "\t" in line else line.split()
                if lineno == 1 and len(parts) == 1 and parts[0].isdigit():
                    continue
                if len(parts) != 2:
                    raise ParseError(f"expected 2 fields, got {len(parts)}", path, lineno)
                try:
                    pairs.append((int(parts[1]), parts[0]))
                except ValueError:
                    raise ParseError(f"bad id {parts[1]!r}", path, lineno) from None
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ParseError("ids are not dense in [0, n)", path)
        vocab = cls(name for _, name in pairs)
        vocab.frozen = frozen
        return vocab


def _split_fields(line: str) -> list[str]:
    return line.split("\t") if "\t" in line else line.split()


def load_triples(path, entity_vocab: Optional[Vocab] = None,
                 relation_vocab: Optional[Vocab] = None):
    """Parse a ``head<TAB>relation<TAB>tail`` file.

    Returns ``(triples, entity_vocab, relation_vocab)`` where ``triples`` is
    an ``(n, 3)`` int64 array. Missing vocabularies are created and extended
    in first-seen order.
    """
    entity_vocab = Vocab() if entity_vocab is None else entity_vocab
    relation_vocab = Vocab() if relation_vocab is None else relation_vocab
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n\r")
            if not line.strip():
                continue
            parts = _split_fields(line)
            if len(parts) != 3:
                raise ParseError(f"expected 3 fields, got {len(parts)}", path, lineno)
            h, r, t = (p.strip() for p in parts)
            try:
                rows.append((entity_vocab.lookup(h), relation_vocab.lookup(r),
                             entity_vocab.lookup(t)))
            except VocabLookupError as exc:
                raise VocabLookupError(f"{path}:{lineno}: {exc}") from None
    triples = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
    return triples, entity_vocab, relation_vocab


def load_attributes(path, entity_vocab: Vocab) -> np.ndarray:
    """Read ``entity<TAB>v1,v2,...`` rows into a dense ``|E| x d`` matrix."""
    rows: dict[int, list[float]] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"expected 2 fields, got {len(parts)}", path, lineno)
            try:
                values = [float(v) for v in parts[1].split(",")]
            except ValueError:
                raise ParseError("attribute values must be decimals", path, lineno) from None
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise ParseError(f"expected {dim} values, got {len(values)}", path, lineno)
            rows[entity_vocab.lookup(parts[0])] = values
    n = len(entity_vocab)
    if len(rows) != n:
        raise DimensionError(f"attributes cover {len(rows)} of {n} entities")
    out = np.zeros((n, dim or 0), dtype=np.float64)
    for idx, values in rows.items():
        out[idx] = values
    return out


def save_attributes(path, attributes: np.ndarray, entity_vocab: Vocab):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, row in enumerate(attributes):
            fh.write(entity_vocab.name(i) + "\t" + ",".join(repr(float(v)) for v in row) + "\n")


def save_triples(path, triples: np.ndarray, entity_vocab: Vocab, relation_vocab: Vocab):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in np.asarray(triples).reshape(-1, 3):
            fh.write(f"{entity_vocab.name(int(h))}\t{relation_vocab.name(int(r))}"
                     f"\t{entity_vocab.name(int(t))}\n")


def _as_triple_array(triples) -> np.ndarray:
    arr = np.asarray(triples, dtype=np.int64)
    return arr.reshape(-1, 3)


@dataclass
class DatasetSplit:
    train: np.ndarray
    valid: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))
    test: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))

    def __post_init__(self):
        self.train = _as_triple_array(self.train)
        self.valid = _as_triple_array(self.valid)
        self.test = _as_triple_array(self.test)

    def check_disjoint(self):
        seen = {}
        for name in ("train", "valid", "test"):
            for row in map(tuple, getattr(self, name).tolist()):
                other = seen.setdefault(row, name)
                if other != name:
                    raise ContractError(f"triple {row} appears in both {other} and {name}")

    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])


def load_dataset(data_dir, inverse_edges=True, attributes=True):
    """Load ``train/valid/test`` splits (``.txt`` or ``.tsv``) from a directory.

    ``entity2id.txt`` / ``relation2id.txt`` are honored when present, and an
    ``attributes.tsv`` file is picked up when ``attributes`` is true.
    """
    def find(stem):
        for ext in (".txt", ".tsv"):
            p = os.path.join(data_dir, stem + ext)
            if os.path.exists(p):
                return p
        return None

    ent_path = os.path.join(data_dir, "entity2id.txt")
    rel_path = os.path.join(data_dir, "relation2id.txt")
    ents = Vocab.load(ent_path) if os.path.exists(ent_path) else Vocab()
    rels = Vocab.load(rel_path) if os.path.exists(rel_path) else Vocab()
    parts = {}
    for name in ("train", "valid", "test"):
        path = find(name)
        if path is None:
            if name == "train":
                raise FileNotFoundError(f"no train.txt or train.tsv in {data_dir}")
            parts[name] = np.zeros((0, 3), np.int64)
            continue
        parts[name], ents, rels = load_triples(path, ents, rels)
    attr = None
    attr_path = os.path.join(data_dir, "attributes.tsv")
    if attributes and os.path.exists(attr_path):
        attr = load_attributes(attr_path, ents)
    split = DatasetSplit(**parts)
    return build_graph(split, ents, rels, attributes=attr, inverse_edges=inverse_edges)


class KnowledgeGraph:
    """Immutable triple store with per-entity adjacency.

    Build instances through :func:`build_graph`.
    """

    def __init__(self, split: DatasetSplit, entity_vocab: Vocab, relation_vocab: Vocab,
                 attributes: Optional[np.ndarray], inverse_edges: bool,
                 indptr, nbr_rel, nbr_ent, nbr_dir):
        self.split = split
        self.entity_vocab = entity_vocab
        self.relation_vocab = relation_vocab
        self.attributes = attributes
        self.inverse_edges = inverse_edges
        self.indptr = indptr
        self.nbr_rel = nbr_rel
        self.nbr_ent = nbr_ent
        self.nbr_dir = nbr_dir
        self.n_entities = len(entity_vocab)
        self.n_relations = len(relation_vocab)
        self._known_codes = np.unique(self.encode(split.all_triples()))
        self._tail_filter = None
        self._head_filter = None
        for arr in (indptr, nbr_rel, nbr_ent, nbr_dir):
            arr.setflags(write=False)

    @property
    def triples(self) -> np.ndarray:
        return self.split.train

    @property
    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def attr_dim(self) -> int:
        return 0 if self.attributes is None else self.attributes.shape[1]

    def encode(self, triples) -> np.ndarray:
        t = _as_triple_array(triples)
        e, r = max(self.n_entities, 1), max(self.n_relations, 1)
        return (t[:, 0] * r + t[:, 1]) * e + t[:, 2]

    def _check_entity(self, e):
        if not 0 <= e < self.n_entities:
            raise VocabLookupError(f"entity id {e} out of range [0, {self.n_entities})")

    def neighbors(self, e: int) -> list[NeighborEntry]:
        self._check_entity(e)
        lo, hi = self.indptr[e], self.indptr[e + 1]
        return [NeighborEntry(int(r), int(n), Direction(int(d)))
                for r, n, d in zip(self.nbr_rel[lo:hi], self.nbr_ent[lo:hi], self.nbr_dir[lo:hi])]

    def is_known(self, h: int, r: int, t: int) -> bool:
        return bool(self.contains(np.array([[h, r, t]]))[0])

    def contains(self, triples) -> np.ndarray:
        """Vectorized membership test against train, valid and test."""
        codes = self.encode(triples)
        pos = np.searchsorted(self._known_codes, codes)
        pos = np.minimum(pos, len(self._known_codes) - 1)
        if len(self._known_codes) == 0:
            return np.zeros(len(codes), dtype=bool)
        return self._known_codes[pos] == codes

    def _build_filters(self):
        tails: dict[tuple[int, int], list[int]] = {}
        heads: dict[tuple[int, int], list[int]] = {}
        for h, r, t in self.split.all_triples().tolist():
            tails.setdefault((h, r), []).append(t)
            heads.setdefault((r, t), []).append(h)
        self._tail_filter = {k: np.unique(v) for k, v in tails.items()}
        self._head_filter = {k: np.unique(v) for k, v in heads.items()}

    def known_tails(self, h: int, r: int) -> np.ndarray:
        if self._tail_filter is None:
            self._build_filters()
        return self._tail_filter.get((h, r), np.zeros(0, np.int64))

    def known_heads(self, r: int, t: int) -> np.ndarray:
        if self._head_filter is None:
            self._build_filters()
        return self._head_filter.get((r, t), np.zeros(0, np.int64))

    # Serialization. The format is a plain little-endian dump so that
    # re-serializing a loaded cache reproduces the same bytes.

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_CACHE_MAGIC)
        buf.write(struct.pack("<IB", _CACHE_VERSION, int(self.inverse_edges)))
        for vocab in (self.entity_vocab, self.relation_vocab):
            blob = "\n".join(vocab.names).encode("utf-8")
            buf.write(struct.pack("<IQ", len(vocab), len(blob)))
            buf.write(blob)
        for name in ("train", "valid", "test"):
            arr = np.ascontiguousarray(getattr(self.split, name), dtype="<i8")
            buf.write(struct.pack("<Q", arr.shape[0]))
            buf.write(arr.tobytes())
        if self.attributes is None:
            buf.write(struct.pack("<QQ", 0, 0))
        else:
            a = np.ascontiguousarray(self.attributes, dtype="<f8")
            buf.write(struct.pack("<QQ", *a.shape))
            buf.write(a.tobytes())
        return buf.getvalue()

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "KnowledgeGraph":
        view = memoryview(data)
        if bytes(view[:4]) != _CACHE_MAGIC:
            raise ParseError("not a graph cache (bad magic)")
        version, inverse = struct.unpack_from("<IB", view, 4)
        if version != _CACHE_VERSION:
            raise ParseError(f"unsupported graph cache version {version}")
        off = 9
        vocabs = []
        for _ in range(2):
            n, nbytes = struct.unpack_from("<IQ", view, off)
            off += 12
            text = bytes(view[off:off + nbytes]).decode("utf-8")
            off += nbytes
            vocabs.append(Vocab(text.split("\n") if n else []))
        parts = {}
        for name in ("train", "valid", "test"):
            (n,) = struct.unpack_from("<Q", view, off)
            off += 8
            parts[name] = np.frombuffer(view[off:off + 24 * n], dtype="<i8").reshape(n, 3).astype(np.int64)
            off += 24 * n
        rows, cols = struct.unpack_from("<QQ", view, off)
        off += 16
        attr = None
        if rows:
            attr = np.frombuffer(view[off:off + 8 * rows * cols], dtype="<f8").reshape(rows, cols).copy()
        return build_graph(DatasetSplit(**parts), vocabs[0], vocabs[1],
                           attributes=attr, inverse_edges=bool(inverse))

    @classmethod
    def load(cls, path) -> "KnowledgeGraph":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build_graph(split: DatasetSplit, entity_vocab: Optional[Vocab] = None,
                relation_vocab: Optional[Vocab] = None, attributes=None,
                inverse_edges: bool = True, n_entities: Optional[int] = None,
                n_relations: Optional[int] = None) -> KnowledgeGraph:
    """Index a dataset split. Adjacency is built from the train split only.

    When vocabularies are omitted, synthetic names ``e<i>`` / ``r<i>`` are
    generated, sized by ``n_entities`` / ``n_relations`` or the largest id.
    """
    all_t = split.all_triples()
    if entity_vocab is None:
        n = n_entities if n_entities is not None else (int(all_t[:, [0, 2]].max()) + 1 if len(all_t) else 0)
        entity_vocab = Vocab(f"e{i}" for i in range(n))
    if relation_vocab is None:
        n = n_relations if n_relations is not None else (int(all_t[:, 1].max()) + 1 if len(all_t) else 0)
        relation_vocab = Vocab(f"r{i}" for i in range(n))
    n_ent, n_rel = len(entity_vocab), len(relation_vocab)
    if len(all_t):
        if all_t[:, [0, 2]].min() < 0 or all_t[:, [0, 2]].max() >= n_ent:
            raise VocabLookupError("triple references an entity id outside the vocabulary")
        if all_t[:, 1].min() < 0 or all_t[:, 1].max() >= n_rel:
            raise VocabLookupError("triple references a relation id outside the vocabulary")
    if attributes is not None:
        attributes = np.asarray(attributes, dtype=np.float64)
        if attributes.ndim != 2 or attributes.shape[0] != n_ent:
            raise DimensionError(
                f"attribute matrix has {attributes.shape[0] if attributes.ndim else 0} rows, expected {n_ent}")

    train = split.train
    owner = [train[:, 0]]
    rel = [train[:, 1]]
    nbr = [train[:, 2]]
    dirs = [np.zeros(len(train), np.int8)]
    if inverse_edges:
        owner.append(train[:, 2])
        rel.append(train[:, 1])
        nbr.append(train[:, 0])
        dirs.append(np.ones(len(train), np.int8))
    owner = np.concatenate(owner)
    rel = np.concatenate(rel)
    nbr = np.concatenate(nbr)
    dirs = np.concatenate(dirs)
    order = np.lexsort((dirs, nbr, rel, owner))
    counts = np.bincount(owner, minlength=n_ent) if len(owner) else np.zeros(n_ent, np.int64)
    indptr = np.zeros(n_ent + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return KnowledgeGraph(split, entity_vocab, relation_vocab, attributes, inverse_edges,
                          indptr, rel[order].astype(np.int64), nbr[order].astype(np.int64),
                          dirs[order].astype(np.int8))


def neighbors(g: KnowledgeGraph, e: int) -> list[NeighborEntry]:
    return g.neighbors(e)
