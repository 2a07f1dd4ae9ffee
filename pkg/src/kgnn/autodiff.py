"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` owns the leaves (parameters) and records every primitive
applied to a tensor that requires grad. :meth:`Tape.backward` walks the
record list in exact reverse order.

Elementwise primitives broadcast like numpy; everything else works on the
last axis so that whole batches go through one call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse, special

from .errors import ContractError, DimensionError, NumericError


class Tensor:
    __slots__ = ("data", "tape", "node", "requires_grad")

    def __init__(self, data, tape: Optional["Tape"] = None, node: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node
        self.requires_grad = tape is not None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: int
    inputs: tuple
    vjp: Callable
    name: str


@dataclass
class _Table:
    group: str
    rows: np.ndarray
    single: bool = False


class Gradients:
    """Sparse gradient map.

    Leaves created through :meth:`Tape.table` are reported per row, keyed
    by ``(group, row)``; rows whose gradient is exactly zero are elided.
    """

    def __init__(self):
        self.blocks: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._by_node: dict[int, np.ndarray] = {}

    def _add_block(self, group, rows, values):
        if group in self.blocks:
            old_rows, old_vals = self.blocks[group]
            rows = np.concatenate([old_rows, rows])
            values = np.concatenate([old_vals, values])
            order = np.argsort(rows, kind="stable")
            rows, values = rows[order], values[order]
            uniq, start = np.unique(rows, return_index=True)
            if len(uniq) != len(rows):
                values = np.add.reduceat(values, start, axis=0)
                rows = uniq
        self.blocks[group] = (rows, values)

    def of(self, t: Tensor) -> Optional[np.ndarray]:
        """Dense gradient with respect to leaf ``t`` (``None`` if unreached)."""
        return self._by_node.get(t.node)

    def keys(self):
        for group, (rows, _) in self.blocks.items():
            for r in rows.tolist():
                yield (group, r)

    def items(self):
        for group, (rows, vals) in self.blocks.items():
            for r, v in zip(rows.tolist(), vals):
                yield (group, r), v

    def __getitem__(self, key):
        group, row = key
        rows, vals = self.blocks[group]
        i = np.searchsorted(rows, row)
        if i >= len(rows) or rows[i] != row:
            raise KeyError(key)
        return vals[i]

    def __contains__(self, key):
        try:
            self[key]
            return True
        except KeyError:
            return False

    def __len__(self):
        return sum(len(r) for r, _ in self.blocks.values())

    def __bool__(self):
        return len(self) > 0

    def scaled(self, c: float) -> "Gradients":
        out = Gradients()
        for g, (rows, vals) in self.blocks.items():
            out.blocks[g] = (rows, vals * c)
        return out

    def max_abs_key(self):
        best, best_key = -1.0, None
        for g, (rows, vals) in self.blocks.items():
            if len(rows) == 0:
                continue
            flat = np.abs(vals.reshape(len(rows), -1))
            with np.errstate(invalid="ignore"):
                mags = np.where(np.isfinite(flat), flat, np.inf).max(axis=1)
            i = int(np.argmax(mags))
            if mags[i] > best:
                best, best_key = mags[i], (g, int(rows[i]))
        return best_key


class Tape:
    """Record of primitive applications for one forward pass."""

    def __init__(self):
        self._records: list[_Record] = []
        self._n = 0
        self._tables: dict[int, _Table] = {}
        self._leaves: list[int] = []

    def __len__(self):
        return len(self._records)

    def _new_node(self) -> int:
        self._n += 1
        return self._n - 1

    def leaf(self, value) -> Tensor:
        """A free differentiable input (no parameter key)."""
        t = Tensor(value, self, self._new_node())
        self._leaves.append(t.node)
        return t

    def table(self, group: str, rows, values) -> Tensor:
        """Leaf whose row ``i`` is the parameter keyed ``(group, rows[i])``."""
        rows = np.asarray(rows, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=np.float64)
        if values.shape[0] != len(rows):
            raise DimensionError(f"table {group}: {len(rows)} keys for {values.shape[0]} rows")
        t = self.leaf(values)
        self._tables[t.node] = _Table(group, rows)
        return t

    def param(self, group: str, value) -> Tensor:
        """Single-key parameter ``(group, 0)``; the tensor has the key's own shape."""
        value = np.asarray(value, dtype=np.float64)
        t = self.leaf(value)
        self._tables[t.node] = _Table(group, np.zeros(1, np.int64), single=True)
        return t

    def record(self, out: np.ndarray, inputs: Sequence[Tensor], vjp, name: str) -> Tensor:
        tapes = {t.tape for t in inputs if t.requires_grad}
        if len(tapes) > 1:
            raise ContractError(f"{name}: inputs come from different tapes")
        t = Tensor(out, self, self._new_node())
        self._records.append(_Record(t.node, tuple(inputs), vjp, name))
        return t

    def backward(self, loss: Tensor) -> Gradients:
        if loss.data.shape not in ((), (1,)):
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        result = Gradients()
        if not loss.requires_grad or loss.tape is not self:
            return result
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g = grads.pop(rec.out, None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise ContractError(f"{rec.name}: gradient shape {gi.shape} != {t.data.shape}")
                prev = grads.get(t.node)
                grads[t.node] = gi if prev is None else prev + gi
        for node in self._leaves:
            g = grads.get(node)
            if g is None:
                continue
            result._by_node[node] = g
            table = self._tables.get(node)
            if table is None:
                continue
            if table.single:
                g = g[None, ...]
            flat = g.reshape(len(table.rows), -1)
            nz = np.flatnonzero(np.any(flat != 0.0, axis=1))
            if len(nz):
                result._add_block(table.group, table.rows[nz], g[nz])
        return result


def backward(tape: Tape, loss: Tensor) -> Gradients:
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# primitives


def _finish(name, out, inputs, vjp):
    if not np.all(np.isfinite(out)):
        raise NumericError(name)
    tape = next((t.tape for t in inputs if t.requires_grad), None)
    if tape is None:
        return Tensor(out)
    return tape.record(out, inputs, vjp, name)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _finish("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def matvec(m, x) -> Tensor:
    """``out[..., i] = sum_j M[i, j] x[..., j]``.

    ``M`` is either one ``(m, n)`` matrix applied to every row of ``x`` or a
    stack ``(..., m, n)`` matched row-for-row with ``x``.
    """
    m, x = as_tensor(m), as_tensor(x)
    if m.ndim < 2 or x.ndim < 1 or m.shape[-1] != x.shape[-1]:
        raise DimensionError(f"matvec: matrix {m.shape} vs vector {x.shape}")
    if m.ndim == 2:
        out = x.data @ m.data.T

        def vjp(g):
            gx = g @ m.data
            gm = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
            return gm, gx
    else:
        if m.shape[:-2] != x.shape[:-1]:
            raise DimensionError(f"matvec: batch shapes {m.shape[:-2]} vs {x.shape[:-1]}")
        out = np.einsum("...ij,...j->...i", m.data, x.data)

        def vjp(g):
            gm = g[..., :, None] * x.data[..., None, :]
            gx = np.einsum("...ij,...i->...j", m.data, g)
            return gm, gx
    return _finish("matvec", out, (m, x), vjp)


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape ``(..., k)`` and ``b`` of shape ``(k, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    return _finish("matmul", out, (a, b), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _finish("concat", out, tuple(ts), vjp)


def take(x, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    x = as_tensor(x)
    ax = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)
    return _finish("take", out, (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {exc}") from None
    return _finish("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _finish("sum", out, (x,), vjp)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = special.expit(x.data)
    return _finish("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _finish("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    """Identity for ``x > 0``, ``slope * x`` otherwise; derivative at 0 is ``slope``."""
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return _finish("leaky_relu", out, (x,), lambda g: (np.where(pos, g, slope * g),))


relu_leaky = leaky_relu


def hinge(x) -> Tensor:
    """``max(0, x)`` with derivative 0 at the kink."""
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, 0.0)
    return _finish("hinge", out, (x,), lambda g: (np.where(pos, g, 0.0),))


def softmax(x, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, stabilized by max subtraction.

    Positions where ``mask`` is false get probability 0; a slice with no
    valid position yields all zeros.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = np.sum(e, axis=axis, keepdims=True)
    out = e / np.where(denom > 0, denom, 1.0)

    def vjp(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner),)
    return _finish("softmax", out, (x,), vjp)


def l1_norm(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = np.sum(np.abs(x.data), axis=axis)
    return _finish("l1_norm", out, (x,),
                   lambda g: (np.expand_dims(g, axis) * np.sign(x.data),))


def l2_norm(x, axis: int = -1) -> Tensor:
    """Euclidean norm; the gradient at the origin is taken as 0."""
    x = as_tensor(x)
    out = np.sqrt(np.sum(x.data * x.data, axis=axis))

    def vjp(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, x.data / safe, 0.0) * np.expand_dims(g, axis),)
    return _finish("l2_norm", out, (x,), vjp)


def dot(a, b, axis: int = -1) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("dot", a, b)
    out = np.sum(a.data * b.data, axis=axis)

    def vjp(g):
        g = np.expand_dims(g, axis)
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _finish("dot", out, (a, b), vjp)


def gather_rows(matrix, indices) -> Tensor:
    """``matrix[indices]``; the gradient only touches the gathered rows."""
    matrix = as_tensor(matrix)
    idx = np.asarray(indices, dtype=np.int64)
    if matrix.ndim < 1:
        raise DimensionError("gather_rows: scalar input")
    if idx.size and (idx.min() < -matrix.shape[0] or idx.max() >= matrix.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {matrix.shape[0]} rows")
    out = matrix.data[idx]

    def vjp(g):
        flat = idx.ravel() % matrix.shape[0]
        g2 = g.reshape(len(flat), -1)
        scatter = sparse.csr_matrix((np.ones(len(flat)), (flat, np.arange(len(flat)))),
                                    shape=(matrix.shape[0], len(flat)))
        return (np.asarray(scatter @ g2).reshape(matrix.shape),)
    return _finish("gather_rows", out, (matrix,), vjp)


# ---------------------------------------------------------------------------
# LSTM cell


def lstm_cell(x, h_prev, c_prev, weight, bias):
    """Standard 4-gate LSTM step on rows.

    ``weight`` is ``(4d, d_in + d)`` and ``bias`` is ``(4d,)``, with gate
    blocks ordered input, forget, cell candidate, output. Returns ``(h, c)``.
    """
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    weight, bias = as_tensor(weight), as_tensor(bias)
    d = h_prev.shape[-1]
    if c_prev.shape != h_prev.shape:
        raise DimensionError(f"lstm_cell: state shapes {h_prev.shape} vs {c_prev.shape}")
    if weight.shape != (4 * d, x.shape[-1] + d) or bias.shape != (4 * d,):
        raise DimensionError(
            f"lstm_cell: weight {weight.shape} / bias {bias.shape} do not match input {x.shape[-1]}, state {d}")
    gates = add(matvec(weight, concat([x, h_prev])), bias)
    i = sigmoid(take(gates, 0, d))
    f = sigmoid(take(gates, d, 2 * d))
    g = tanh(take(gates, 2 * d, 3 * d))
    o = sigmoid(take(gates, 3 * d, 4 * d))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c
