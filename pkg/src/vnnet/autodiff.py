"""A small tape-based reverse-mode autodiff over numpy arrays.

Operations record themselves on the innermost active :class:`Tape` when any
input requires a gradient; outside a tape they simply compute values, which
is how inference runs.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable  # grad_out -> tuple of grads (None allowed)
    op: str


_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


class Tape:
    """Ordered log of executed primitives; use as a context manager.

    >>> with Tape() as tape:
    ...     loss = sum_(w * w)
    >>> tape.backward(loss)
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

        Each recorded op is visited once, in reverse order; the tape is
        cleared afterwards. Returns the leaf gradients keyed by ``id``.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        produced = {id(r.out) for r in self.records}
        leaves = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        if not self.records and loss.requires_grad:
            leaves[id(loss)] = loss
        out = {}
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
            out[key] = t.grad
        self.records.clear()
        return out


def _record(out: Tensor, inputs, backward, op):
    if not any(i.requires_grad for i in inputs):
        return out
    tapes = _stack()
    out.requires_grad = True
    if tapes:
        tapes[-1].records.append(_Record(out, tuple(inputs), backward, op))
    return out


def backward(tape: Tape, loss: Tensor):
    return tape.backward(loss)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------- primitives

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b):
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = Tensor(a.data / b.data)

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _record(out, (a, b), bw, "div")


def scale(a, c: float):
    a = as_tensor(a)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,), "scale")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g
    return _record(out, (a, b), bw, "matmul")


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    pos = a.data > 0
    out = Tensor(np.where(pos, a.data, slope * a.data))
    return _record(out, (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def logistic(a):
    a = as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    p = x >= 0
    y[p] = 1.0 / (1.0 + np.exp(-x[p]))
    ex = np.exp(x[~p])
    y[~p] = ex / (1.0 + ex)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),), "logistic")


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,), "log")


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y,), "exp")


def abs_(a):
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),), "abs")


def clip(a, lo, hi):
    """Clamp values; gradient is zero where clamping is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    out = Tensor(np.clip(a.data, lo, hi))
    return _record(out, (a,), lambda g: (g * inside,), "clip")


def sum_(a, axis=None):
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _record(out, (a,), bw, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _record(out, (a,), bw, "softmax")


def concat(tensors: Sequence, axis=0):
    ts = [as_tensor(t) for t in tensors]
    try:
        out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _record(out, ts, bw, "concat")


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def gather_rows(a, index):
    """``a[index]`` along the first axis."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")
    out = Tensor(a.data[index])

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _record(out, (a,), bw, "gather_rows")


def scatter_add_rows(a, index, num_rows: int):
    """Sum rows of ``a`` into ``num_rows`` buckets given by ``index``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != a.shape[0]:
        raise ShapeError(f"scatter_add_rows: {index.shape[0]} indices for {a.shape[0]} rows")
    buf = np.zeros((num_rows,) + a.shape[1:], dtype=a.data.dtype)
    np.add.at(buf, index, a.data)
    out = Tensor(buf)
    return _record(out, (a,), lambda g: (g[index],), "scatter_add_rows")


def dropout(a, rate: float, train: bool, rng: np.random.Generator | None = None):
    """Inverted dropout: kept units are scaled by 1/(1-rate); identity when not training."""
    a = as_tensor(a)
    if not train or rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(mask))


def segment_softmax(logits, segments, num_segments: int):
    """Softmax of a 1-d tensor within groups given by ``segments``."""
    logits = as_tensor(logits)
    segments = np.asarray(segments, dtype=np.int64)
    shift = np.full(num_segments, -np.inf)
    np.maximum.at(shift, segments, logits.data)
    e = exp(sub(logits, Tensor(shift[segments])))
    denom = gather_rows(scatter_add_rows(e, segments, num_segments), segments)
    return div(e, denom)


# --------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f: Callable[[], Tensor], params: dict, h=1e-5, tol=1e-4, floor=1e-6) -> GradCheckReport:
    """Compare tape gradients of ``f()`` to central differences, elementwise.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    entries whose true gradient is ~0 from amplifying rounding noise.
    """
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    report = GradCheckReport(0.0, tol=tol)
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f().data)
            flat[i] = old - h
            fm = float(f().data)
            flat[i] = old
            nflat[i] = (fp - fm) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        err = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
        report.per_param[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
    return report


# --------------------------------------------------------------- checkpoints

_MAGIC = b"VNCKPT01"


def save_tensors(path, tensors: dict, header: dict | None = None):
    """Write named arrays as raw little-endian data after a JSON header.

    Layout: 8-byte magic, 8-byte little-endian header length, UTF-8 JSON
    header, then each tensor's bytes in header order.
    """
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({"meta": header or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def load_tensors(path) -> tuple[dict, dict]:
    """Inverse of :func:`save_tensors`; returns ``(arrays, meta)``."""
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        head = json.loads(f.read(n).decode())
        body = f.read()
    arrays = {}
    for e in head["tensors"]:
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays, head["meta"]
