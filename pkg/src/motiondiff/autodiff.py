"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every primitive applied to tracked values; calling
:func:`backward` sweeps the tape in reverse and writes d(loss)/d(parameter)
into the :class:`Parameters` registry.  Values built only from constants are
never recorded, so the same model code runs gradient-free at inference time.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes, a
scalar operand, or a row vector matching the trailing axis (bias addition).
Anything else must be reshaped explicitly.
"""

from __future__ import annotations

import builtins
import itertools
import struct
from collections.abc import Callable, Iterator, Sequence
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    IndexOutOfRange,
    NonScalarLoss,
    ShapeInconsistent,
    ShapeMismatch,
    TruncatedFile,
)

CHECKPOINT_MAGIC = b"SMDK1"


class Value:
    """An array plus an optional handle to the tape node that produced it."""

    __slots__ = ("data", "node_id", "tape")
    __array_priority__ = 1000  # keep ndarray.__mul__ from swallowing Value operands

    def __init__(self, data, tape: Tape | None = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        kind = "constant" if self.node_id is None else f"node {self.node_id}"
        return f"Value(shape={self.shape}, {kind})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


class Parameters:
    """Named trainable arrays with matching gradient slots."""

    def __init__(self) -> None:
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, array) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(array, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def count(self, prefix: str = "") -> int:
        return builtins.sum(v.size for k, v in self.values.items() if k.startswith(prefix))

    def zero_grad(self) -> None:
        for name, arr in self.values.items():
            self.grads[name] = np.zeros_like(arr)

    def copy(self) -> Parameters:
        out = Parameters()
        for name, arr in self.values.items():
            out.add(name, arr.copy())
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(encode_checkpoint(self))

    @classmethod
    def load(cls, path: str | Path) -> Parameters:
        return decode_checkpoint(Path(path).read_bytes())


def encode_checkpoint(params: Parameters) -> bytes:
    """Serialize to the ``SMDK1`` little-endian container."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(params))]
    for name, arr in params.values.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Parameters:
    if blob[:5] != CHECKPOINT_MAGIC:
        raise BadMagic(f"expected {CHECKPOINT_MAGIC!r}, found {blob[:5]!r}")
    pos = 5

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedFile("checkpoint ends early", pos)
        out = blob[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    params = Parameters()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        params.add(name, arr)
    if pos != len(blob):
        raise ShapeInconsistent(f"{len(blob) - pos} trailing bytes after last parameter")
    return params


class _SliceGrad:
    """Sparse gradient contribution: ``array`` lands in ``index`` of the parent."""

    __slots__ = ("array", "index")

    def __init__(self, index, array):
        self.index = index
        self.array = array


class Tape:
    """Append-only record of primitive applications.

    Node inputs always reference earlier nodes, so a reverse sweep over the
    list is a valid topological order.
    """

    def __init__(self, params: Parameters | None = None):
        self.params = params if params is not None else Parameters()
        self._shapes: list[tuple[int, ...]] = []
        self._parents: list[tuple[int | None, ...]] = []
        self._backward: list[Callable | None] = []
        self._kinds: list[str] = []
        self._param_nodes: dict[str, int] = {}
        self._leaf_grads: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._kinds)

    def param(self, name: str) -> Value:
        """Leaf value bound to a registered parameter (one node per tape)."""
        if name not in self._param_nodes:
            self._param_nodes[name] = self._append(self.params[name].shape, (), None, "param")
        return Value(self.params[name], self, self._param_nodes[name])

    def watch(self, array) -> Value:
        """Leaf value for a non-parameter input whose gradient is wanted."""
        arr = np.asarray(array, dtype=np.float64)
        return Value(arr, self, self._append(arr.shape, (), None, "input"))

    def grad(self, value: Value) -> np.ndarray:
        """Gradient of the last backward pass with respect to a watched leaf."""
        g = self._leaf_grads.get(value.node_id)
        return np.zeros(value.shape) if g is None else g

    def _append(self, shape, parents, fn, kind) -> int:
        self._shapes.append(tuple(shape))
        self._parents.append(tuple(parents))
        self._backward.append(fn)
        self._kinds.append(kind)
        return len(self._kinds) - 1

    def backward(self, loss: Value) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Value) -> None:
    """Accumulate d(loss)/d(parameter) into ``tape.params.grads``.

    Parameters not reachable from ``loss`` receive an all-zero gradient.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    params = tape.params
    if loss.node_id is None or loss.tape is not tape:
        for name in params:
            params.grads[name] = np.zeros_like(params[name])
        return
    n = loss.node_id + 1
    grads: list = [None] * n
    owned = [False] * n
    grads[loss.node_id] = np.ones(tape._shapes[loss.node_id])
    for i in range(n - 1, -1, -1):
        g = grads[i]
        if g is None:
            continue
        fn = tape._backward[i]
        if fn is None:
            continue
        contributions = fn(g)
        for pid, pg in zip(tape._parents[i], contributions):
            if pid is None or pg is None:
                continue
            cur = grads[pid]
            if isinstance(pg, _SliceGrad):
                if cur is None:
                    cur = np.zeros(tape._shapes[pid])
                    owned[pid] = True
                elif not owned[pid]:
                    cur = cur.copy()
                    owned[pid] = True
                cur[pg.index] += pg.array
                grads[pid] = cur
            elif cur is None:
                grads[pid] = pg
            elif owned[pid]:
                cur += pg
            else:
                grads[pid] = cur + pg
                owned[pid] = True
    for name in params:
        nid = tape._param_nodes.get(name)
        g = grads[nid] if nid is not None and nid < n else None
        params.grads[name] = np.zeros_like(params[name]) if g is None else np.array(g)
    tape._leaf_grads = {
        i: grads[i] for i in range(n) if tape._kinds[i] == "input" and grads[i] is not None
    }


# ---------------------------------------------------------------------------
# primitives


def _tape_of(*values: Value) -> Tape | None:
    tape = None
    for v in values:
        if v.tape is not None:
            if tape is not None and v.tape is not tape:
                raise ValueError("values from different tapes cannot be combined")
            tape = v.tape
    return tape


def _record(out: np.ndarray, inputs: Sequence[Value], fn: Callable, kind: str) -> Value:
    tape = _tape_of(*inputs)
    if tape is None or not any(v.tracked for v in inputs):
        return Value(out)
    nid = tape._append(out.shape, tuple(v.node_id for v in inputs), fn, kind)
    return Value(out, tape, nid)


def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1 and b.ndim <= 1:
        return "b_scalar"
    if a.size == 1 and a.ndim <= 1:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "b_row"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "a_row"
    raise ShapeMismatch(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) <= 1 and int(np.prod(shape)) == 1:
        return np.array(g.sum()).reshape(shape)
    return g.reshape(-1, shape[0]).sum(axis=0)


def _elementwise(a, b, kind: str):
    a, b = as_value(a), as_value(b)
    _broadcast_kind(a.data, b.data)
    return a, b


def add(a, b) -> Value:
    a, b = _elementwise(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add"
    )


def sub(a, b) -> Value:
    a, b = _elementwise(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub"
    )


def mul(a, b) -> Value:
    a, b = _elementwise(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (
            _reduce_to(g * bd, ad.shape) if a.tracked else None,
            _reduce_to(g * ad, bd.shape) if b.tracked else None,
        ),
        "mul",
    )


def div(a, b) -> Value:
    a, b = _elementwise(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        out,
        (a, b),
        lambda g: (
            _reduce_to(g / bd, ad.shape) if a.tracked else None,
            _reduce_to(-g * out / bd, bd.shape) if b.tracked else None,
        ),
        "div",
    )


def matmul(a, b) -> Value:
    """``a[..., m, k] @ b[k, n]`` (shared weight) or batched with equal leading dims."""
    a, b = as_value(a), as_value(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"matmul shapes {ad.shape} @ {bd.shape}")
    if bd.ndim == 2:
        k, n = bd.shape

        def fn(g):
            ga = g @ bd.T if a.tracked else None
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n) if b.tracked else None
            return ga, gb

    else:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise ShapeMismatch(f"matmul batch dims {ad.shape} @ {bd.shape}")

        def fn(g):
            ga = g @ np.swapaxes(bd, -1, -2) if a.tracked else None
            gb = np.swapaxes(ad, -1, -2) @ g if b.tracked else None
            return ga, gb

    return _record(ad @ bd, (a, b), fn, "matmul")


def reshape(x, shape: Sequence[int]) -> Value:
    x = as_value(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    old = x.shape
    return _record(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes: Sequence[int]) -> Value:
    x = as_value(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch(f"bad permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(values: Sequence, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    if not vals:
        raise ShapeMismatch("concat of an empty list")
    axis = axis % vals[0].ndim
    try:
        out = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def fn(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in itertools.pairwise(bounds):
            idx[axis] = slice(int(lo), int(hi))
            parts.append(g[tuple(idx)])
        return parts

    return _record(out, vals, fn, "concat")


def _slice(x: Value, index: tuple) -> Value:
    return _record(x.data[index], (x,), lambda g: (_SliceGrad(index, g),), "slice")


def split(x, sections: int | Sequence[int], axis: int = 0) -> list[Value]:
    """Split along ``axis`` into equal pieces (int) or at the given sizes (sequence)."""
    x = as_value(x)
    axis = axis % x.ndim
    size = x.shape[axis]
    if isinstance(sections, int):
        if sections <= 0 or size % sections:
            raise ShapeMismatch(f"cannot split length {size} into {sections} pieces")
        sizes = [size // sections] * sections
    else:
        sizes = list(sections)
        if builtins.sum(sizes) != size:
            raise ShapeMismatch(f"split sizes {sizes} do not sum to {size}")
    out, lo = [], 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(lo, lo + s)
        out.append(_slice(x, tuple(idx)))
        lo += s
    return out


def _check_index(index, n: int) -> np.ndarray:
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise IndexOutOfRange("index must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexOutOfRange(f"index out of range for axis length {n}")
    return idx


def gather_rows(x, index, axis: int = 0) -> Value:
    """``out[..., p, ...] = x[..., index[p], ...]`` along ``axis``."""
    x = as_value(x)
    axis = axis % x.ndim
    idx = _check_index(index, x.shape[axis])
    shape = x.shape
    targets = np.unique(idx)
    order = starts = None
    if targets.size != idx.size:
        # group repeated positions so the backward pass is one reduceat
        order = np.argsort(idx, kind="stable")
        _, starts = np.unique(idx[order], return_index=True)

    def fn(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        if order is None:
            sl[axis] = idx
            full[tuple(sl)] = g
        else:
            sl[axis] = targets
            full[tuple(sl)] = np.add.reduceat(np.take(g, order, axis=axis), starts, axis=axis)
        return (full,)

    return _record(np.take(x.data, idx, axis=axis), (x,), fn, "gather")


def scatter_rows_overwrite(x, index, rows, axis: int = 0) -> Value:
    """Copy of ``x`` with the slices ``index`` along ``axis`` replaced by ``rows``."""
    x, rows = as_value(x), as_value(rows)
    axis = axis % x.ndim
    idx = _check_index(index, x.shape[axis])
    if np.unique(idx).size != idx.size:
        raise IndexOutOfRange("scatter indices must be distinct")
    expected = x.shape[:axis] + (idx.size,) + x.shape[axis + 1 :]
    if rows.shape != expected:
        raise ShapeMismatch(f"rows shape {rows.shape}, expected {expected}")
    sl = [slice(None)] * x.ndim
    sl[axis] = idx
    sl = tuple(sl)
    out = x.data.copy()
    out[sl] = rows.data

    def fn(g):
        gx = g.copy()
        gx[sl] = 0.0
        return gx, g[sl]

    return _record(out, (x, rows), fn, "scatter")


def exp(x) -> Value:
    x = as_value(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softplus(x) -> Value:
    x = as_value(x)
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))  # same as logaddexp(0, x), faster
    return _record(out, (x,), lambda g: (g * _sigmoid(xd),), "softplus")


def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None) -> Value:
    x = as_value(x)
    axes = _axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
    return _record(
        np.sum(x.data, axis=axes),
        (x,),
        lambda g: (np.broadcast_to(g.reshape(kept), shape),),
        "sum",
    )


def mean(x, axis=None) -> Value:
    x = as_value(x)
    axes = _axes(axis, x.ndim)
    shape = x.shape
    count = int(np.prod([shape[a] for a in axes])) if axes else 1
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
    return _record(
        np.mean(x.data, axis=axes),
        (x,),
        lambda g: (np.broadcast_to(g.reshape(kept) / count, shape),),
        "mean",
    )


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Value:
    """Normalize over the trailing axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_value(x), as_value(gain), as_value(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    gd = gain.data

    def fn(g):
        gx = None
        if x.tracked:
            gh = g * gd
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gain.tracked else None
        gb = g.reshape(-1, d).sum(axis=0) if bias.tracked else None
        return gx, gg, gb

    return _record(xhat * gd + bias.data, (x, gain, bias), fn, "layer_norm")


def softmax_lastdim(x) -> Value:
    x = as_value(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), "softmax")


def mse(a, b) -> Value:
    """Mean of squared differences (a scalar)."""
    a, b = as_value(a), as_value(b)
    if b.shape != a.shape and b.data.size == 1 and not b.tracked:
        b = Value(np.full(a.shape, float(b.data.reshape(-1)[0])))
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    n = diff.size
    return _record(
        np.array(np.mean(diff * diff)),
        (a, b),
        lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n),
        "mse",
    )


# ---------------------------------------------------------------------------
# gradient oracle


def finite_difference_check(
    f: Callable[[Tape], Value],
    params: Parameters,
    eps: float = 1e-6,
    names: Sequence[str] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` builds a scalar loss on the tape it is given.  ``max_entries`` caps
    how many entries per parameter are probed (chosen with a seeded RNG).
    """
    tape = Tape(params)
    backward(tape, f(tape))
    analytic = {k: v.copy() for k, v in params.grads.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names if names is not None else params.names():
        arr = params[name]
        flat = arr.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            up = f(Tape(params)).item()
            flat[i] = orig - eps
            down = f(Tape(params)).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


class Frozen:
    """Tape-free parameter access with the same ``param(name)`` surface as :class:`Tape`."""

    def __init__(self, params: Parameters):
        self.params = params

    def param(self, name: str) -> Value:
        return Value(self.params[name])
