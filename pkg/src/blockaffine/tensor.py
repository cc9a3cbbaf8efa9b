"""Dense tensors with a small reverse-mode tape.

Every differentiable op records a node on the active :class:`Tape` when at
least one input requires grad. A node either keeps references to the inputs
it needs for its vector-Jacobian product, or (see :func:`checkpoint`) keeps
only the inputs of a whole sub-computation and rebuilds the intermediates
while the backward pass runs.

There is no implicit broadcasting. The only broadcast is the shared-block one
in :func:`batched_block_matmul` and its explicit companion :func:`tile_blocks`.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
_NAMES = {v: k for k, v in DTYPES.items()}


class ShapeError(ValueError):
    pass


class DTypeError(TypeError):
    pass


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    pass


def as_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return DTYPES[dtype]
        except KeyError:
            raise DTypeError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}") from None
    dt = np.dtype(dtype)
    if dt not in _NAMES:
        raise DTypeError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


class Tensor:
    """Immutable dense array plus a ``requires_grad`` flag.

    The wrapped buffer is marked read-only. Optimizers replace ``data``
    wholesale rather than writing into it.
    """

    __slots__ = ("_data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dt = arr.dtype if arr.dtype in _NAMES else DTYPES["f64"]
        else:
            dt = as_dtype(dtype)
        arr = np.array(data, dtype=dt, copy=True, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, arr: np.ndarray) -> None:
        if arr.dtype not in _NAMES:
            raise DTypeError(f"unsupported dtype {arr.dtype}")
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self) -> str:
        return _NAMES[self._data.dtype]

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def nbytes(self) -> int:
        return int(self._data.nbytes)

    def numpy(self) -> np.ndarray:
        return np.array(self._data)

    def item(self) -> float:
        return float(self._data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    @property
    def T(self) -> "Tensor":
        return transpose2d(self)


def zeros(shape: Sequence[int], dtype="f64", requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape), dtype=as_dtype(dtype)), requires_grad)


def ones(shape: Sequence[int], dtype="f64", requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.ones(tuple(shape), dtype=as_dtype(dtype)), requires_grad)


def eye(n: int, dtype="f64") -> Tensor:
    return Tensor._wrap(np.eye(n, dtype=as_dtype(dtype)))


# --------------------------------------------------------------------------
# tape

VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(eq=False)
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: VJP
    op: str
    recompute: bool = False


@dataclass(eq=False)
class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded when any of their inputs requires grad.
    """

    nodes: list[Node] = field(default_factory=list)
    _produced: set[int] = field(default_factory=set, repr=False)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.out))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def _backprop(self, out: Tensor, seed: np.ndarray) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(out): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        return grads

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(loss, self)


_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def current_tape() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording; ops inside run as plain array math."""
    st = _stack()
    _local.stack = []
    try:
        yield
    finally:
        _local.stack = st


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` for every grad-requiring leaf on ``tape``.

    Tensors with ``requires_grad=False`` never appear in the result.
    """
    if loss.shape != ():
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss not in tape:
        raise TapeError("loss was not produced on this tape (detached or recorded elsewhere)")
    grads = tape._backprop(loss, np.ones((), dtype=loss.data.dtype))
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp not in tape:
                leaves[id(inp)] = inp
    return {t: grads[k] for k, t in leaves.items() if k in grads}


# --------------------------------------------------------------------------
# op plumbing

def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _same_dtype(op: str, *ts: Tensor) -> None:
    dts = {t.data.dtype for t in ts}
    if len(dts) != 1:
        raise DTypeError(f"{op}: dtype mismatch {[t.dtype for t in ts]}")


def _emit(op: str, arr: np.ndarray, inputs: tuple[Tensor, ...], make_vjp) -> Tensor:
    _check_finite(arr, op)
    tape = current_tape()
    needs = tuple(t.requires_grad for t in inputs)
    if tape is None or not any(needs):
        return Tensor._wrap(arr)
    out = Tensor._wrap(arr, True)
    tape.record(Node(out, inputs, make_vjp(needs), op))
    return out


# --------------------------------------------------------------------------
# ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    _same_dtype("matmul", a, b)
    A, B = a.data, b.data

    def make(needs):
        def vjp(g):
            return (g @ B.T if needs[0] else None, A.T @ g if needs[1] else None)
        return vjp

    return _emit("matmul", A @ B, (a, b), make)


def batched_block_matmul(blocks: Tensor, shared: Tensor) -> Tensor:
    """``out[k, j] = blocks[k, j] @ shared[j]`` for blocks ``[k, j, b, b]`` and shared ``[j, b, b]``."""
    if blocks.data.ndim != 4 or shared.data.ndim != 3:
        raise ShapeError(f"expected blocks [k,j,b,b] and shared [j,b,b], got {blocks.shape}, {shared.shape}")
    k, j, b1, b2 = blocks.shape
    if b1 != b2 or shared.shape != (j, b1, b1):
        raise ShapeError(f"block-size mismatch: blocks {blocks.shape}, shared {shared.shape}")
    _same_dtype("batched_block_matmul", blocks, shared)
    X, S = blocks.data, shared.data

    def make(needs):
        def vjp(g):
            gx = g @ np.swapaxes(S, -1, -2)[None] if needs[0] else None
            gs = (np.swapaxes(X, -1, -2) @ g).sum(axis=0) if needs[1] else None
            return gx, gs
        return vjp

    return _emit("batched_block_matmul", np.matmul(X, S[None]), (blocks, shared), make)


def tile_blocks(shared: Tensor, k: int) -> Tensor:
    """Repeat ``shared[j, b, b]`` along a new leading axis: ``out[k_, j] = shared[j]``."""
    if shared.data.ndim != 3:
        raise ShapeError(f"tile_blocks expects [j,b,b], got {shared.shape}")
    S = shared.data

    def make(needs):
        return lambda g: (g.sum(axis=0),)

    return _emit("tile_blocks", np.broadcast_to(S, (k, *S.shape)).copy(), (shared,), make)


def gather_blocks(table: Tensor, index: Sequence[int]) -> Tensor:
    """``out[i] = table[index[i]]``; the backward pass scatter-adds."""
    idx = np.asarray(index, dtype=np.intp)
    if table.data.ndim < 1 or idx.ndim != 1:
        raise ShapeError("gather_blocks expects a table and a 1-d index")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather index out of range [0, {table.shape[0]})")
    T = table.data

    def make(needs):
        def vjp(g):
            acc = np.zeros_like(T)
            np.add.at(acc, idx, g)
            return (acc,)
        return vjp

    return _emit("gather_blocks", T[idx], (table,), make)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    _same_dtype("add", a, b)

    def make(needs):
        return lambda g: (g if needs[0] else None, g if needs[1] else None)

    return _emit("add", a.data + b.data, (a, b), make)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
    _same_dtype("mul", a, b)
    A, B = a.data, b.data

    def make(needs):
        return lambda g: (g * B if needs[0] else None, g * A if needs[1] else None)

    return _emit("mul", A * B, (a, b), make)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)

    def make(needs):
        return lambda g: (g * s,)

    return _emit("scale", a.data * s, (a,), make)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    src = a.shape

    def make(needs):
        return lambda g: (g.reshape(src),)

    return _emit("reshape", np.ascontiguousarray(a.data).reshape(shape), (a,), make)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.data.ndim}")
    inv = tuple(np.argsort(axes))

    def make(needs):
        return lambda g: (np.transpose(g, inv),)

    return _emit("permute", np.ascontiguousarray(np.transpose(a.data, axes)), (a,), make)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got {a.shape}")
    return permute(a, (1, 0))


def reduce_sum(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.data.ndim)) if axes is None else tuple(ax % a.data.ndim for ax in axes)
    src = a.shape

    def make(needs):
        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, axes), src).copy(),)
        return vjp

    return _emit("reduce_sum", np.asarray(a.data.sum(axis=axes)), (a,), make)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def make(needs):
        return lambda g: (g * (1 - y * y),)

    return _emit("tanh", y, (a,), make)


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax of a ``[batch, classes]`` matrix."""
    if a.data.ndim != 2:
        raise ShapeError(f"log_softmax expects [batch, classes], got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def make(needs):
        def vjp(g):
            return (g - np.exp(y) * g.sum(axis=1, keepdims=True),)
        return vjp

    return _emit("log_softmax", y, (a,), make)


def checkpoint(fn: Callable[..., Tensor], *inputs: Tensor) -> Tensor:
    """Run ``fn(*inputs)`` without keeping its intermediates.

    A single node is recorded; during backward ``fn`` is re-executed on the
    saved inputs under a private tape. Results are bitwise identical to calling
    ``fn`` directly because the same ops run in the same order.
    """
    with no_tape():
        arr = fn(*inputs).data
    tape = current_tape()
    needs = tuple(t.requires_grad for t in inputs)
    if tape is None or not any(needs):
        return Tensor._wrap(arr)

    def vjp(g):
        clones = [Tensor._wrap(t.data, t.requires_grad) for t in inputs]
        with Tape() as inner:
            y = fn(*clones)
        grads = inner._backprop(y, g) if y in inner else {}
        return tuple(grads.get(id(c)) for c in clones)

    out = Tensor._wrap(arr, True)
    tape.record(Node(out, tuple(inputs), vjp, "checkpoint", recompute=True))
    return out
