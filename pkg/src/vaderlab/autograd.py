"""Define-by-run reverse-mode autodiff over numpy arrays.

Operations record a node on the innermost active :class:`Tape` when any input
requires a gradient. Outside a tape nothing is recorded, so sampling and
evaluation code can run graph-free at no extra cost.
"""

from __future__ import annotations

import contextlib
import hashlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from vaderlab.errors import GradientError, NonFiniteError, NondeterminismError, ShapeError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "apply",
    "backward",
    "stop_grad",
    "checkpoint",
    "precision",
    "default_dtype",
    "no_grad",
]

_local = threading.local()
_uid = itertools.count()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
        _local.dtype = np.float64
    return _local.tapes


def default_dtype() -> np.dtype:
    _stack()
    return _local.dtype


@contextlib.contextmanager
def precision(dtype: str | type) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    _stack()
    old = _local.dtype
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = old


def current_tape() -> "Tape | None":
    tapes = _stack()
    return tapes[-1] if tapes else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording, even inside an active tape."""
    tapes = _stack()
    tapes.append(None)
    try:
        yield
    finally:
        tapes.pop()


class Tensor:
    """Dense array with optional gradient tracking."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._node: int | None = None
        self.uid = next(_uid)

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._tape = None
        out._node = None
        out.uid = next(_uid)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, ())
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Parameter(Tensor):
    """Named model weight. ``trainable`` doubles as ``requires_grad``."""

    def __init__(self, name: str, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.requires_grad = bool(value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: int = 0


@dataclass
class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; a tape is consumed by a single :func:`backward`.
    """

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        tapes = _stack()
        assert tapes and tapes[-1] is self
        tapes.pop()

    def record(self, node: Node) -> int:
        if self.consumed:
            raise GradientError("cannot record on a consumed tape")
        idx = len(self.nodes)
        self.nodes.append(node)
        node.out._tape = self
        node.out._node = idx
        return idx

    @property
    def saved_activations(self) -> int:
        return sum(n.saved for n in self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp, saved: int = 1) -> Tensor:
    tape = current_tape()
    node_id = len(tape.nodes) if tape is not None else None
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op, node_id)
    out = Tensor._wrap(data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(op, out, inputs, vjp, saved))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), saved=0)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), saved=0)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), saved=2)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit("scalar_mul", a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,), saved=0)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a, b)
    pick_a = a.data <= b.data
    return _emit("minimum", np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


# ---------------------------------------------------------------------------
# elementwise unary ops


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data
    return _emit("silu", xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def log_sigmoid(x: Tensor) -> Tensor:
    v = x.data
    y = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))
    return _emit("log_sigmoid", y, (x,), lambda g: (g * _sigmoid(-v),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise NonFiniteError("log", len(current_tape().nodes) if current_tape() else None)
    return _emit("log", np.log(xd), (x,), lambda g: (g / xd,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _emit("sqrt", y, (x,), lambda g: (g * 0.5 / y,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _emit("clip", np.clip(xd, lo, hi), (x,), lambda g: (np.where(inside, g, 0.0),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))

    return _emit("matmul", ad @ bd, (a, b), vjp, saved=2)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` as a single node."""
    if x.ndim < 1 or w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("affine", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("affine", w.shape, b.shape)
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if b is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _emit("affine", out, inputs, vjp)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("reduce_sum", np.sum(x.data, axis=axes, keepdims=keepdims), (x,), vjp, saved=0)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    n = int(np.prod([shape[a] for a in axes])) if axes else 1

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit("reduce_mean", np.mean(x.data, axis=axes, keepdims=keepdims), (x,), vjp, saved=0)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),), saved=0)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), saved=0)


def broadcast(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", x.shape, shape) from None
    old = x.shape
    return _emit("broadcast", out, (x,), lambda g: (_unbroadcast(g, old),), saved=0)


def slice_(x: Tensor, index) -> Tensor:
    shape = x.shape
    dtype = x.data.dtype
    try:
        out = x.data[index]
    except IndexError as e:
        raise ShapeError("slice", shape, str(e)) from None
    out = np.array(out, copy=True)

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _emit("slice", out, (x,), vjp, saved=0)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(t) for t in xs)
    if not xs:
        raise ShapeError("concat", (), ())
    ax = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(t.shape[i] != xs[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError("concat", xs[0].shape, t.shape)
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=ax)
    return _emit("concat", out, xs, lambda g: tuple(np.split(g, bounds, axis=ax)), saved=0)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in xs]
    return concat(xs, axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _emit("log_softmax", y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scalar_mul": scalar_mul,
    "matmul": matmul,
    "affine": affine,
    "tanh": tanh,
    "silu": silu,
    "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid,
    "exp": exp,
    "reduce_mean": reduce_mean,
    "reduce_sum": reduce_sum,
    "slice": slice_,
    "concat": concat,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "log": log,
    "square": square,
    "sqrt": sqrt,
    "broadcast": broadcast,
    "reshape": reshape,
    "transpose": transpose,
    "minimum": minimum,
    "clip": clip,
}


def apply(op_kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch by op name; ``concat`` takes its tensors as positional inputs."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    if op_kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# gradient control


def stop_grad(x: Tensor) -> Tensor:
    """Same values, no gradient path back to ``x``."""
    return Tensor._wrap(x.data)


def _digest(a: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(a).tobytes(), digest_size=16).digest()


class _Parts(list):
    """Ordered gradient contributions, folded one at a time by the receiver."""


def _accum(prev, gi):
    parts = gi if isinstance(gi, _Parts) else (gi,)
    for part in parts:
        prev = part if prev is None else prev + part
    return prev


def _backprop(tape: Tape, out: Tensor, seed: np.ndarray,
              keep_parts: bool = False) -> dict[int, tuple[Tensor, object]]:
    """Propagate ``seed`` from ``out`` through ``tape``.

    Returns gradients for every tensor that was an input to the graph but not
    produced on this tape, keyed by uid. Accumulation is in reverse tape order.
    With ``keep_parts`` external gradients stay unsummed so a caller can fold
    them in the same order a flat tape would.
    """
    grads: dict[int, np.ndarray] = {out.uid: seed}
    external: dict[int, tuple[Tensor, object]] = {}
    if out._tape is not tape:
        return {out.uid: (out, _Parts([seed]) if keep_parts else seed)}
    for node in reversed(tape.nodes[: out._node + 1]):
        g = grads.pop(node.out.uid, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._tape is tape:
                grads[t.uid] = _accum(grads.get(t.uid), gi)
            elif keep_parts:
                prev = external.get(t.uid)
                parts = prev[1] if prev is not None else _Parts()
                parts.extend(gi if isinstance(gi, _Parts) else (gi,))
                external[t.uid] = (t, parts)
            else:
                prev = external.get(t.uid)
                external[t.uid] = (t, _accum(None if prev is None else prev[1], gi))
    return external


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
    """Differentiate a scalar ``loss`` and consume its tape.

    Leaf tensors that require gradients get ``.grad`` set. Returns a map from
    parameter name to gradient; parameters in ``params`` that the loss does
    not reach map to zeros.
    """
    if loss.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        # nothing upstream requires grad: every parameter is unreachable
        if current_tape() is None:
            raise GradientError("backward() needs an active tape")
        return {p.name: np.zeros_like(p.data) for p in params} if params is not None else {}
    if tape.consumed:
        raise GradientError("tape already consumed by an earlier backward()")
    leaves = _backprop(tape, loss, np.ones_like(loss.data))
    tape.consumed = True
    out: dict[str, np.ndarray] = {}
    for t, g in leaves.values():
        t.grad = g
        if isinstance(t, Parameter):
            out[t.name] = g
    if params is not None:
        wanted = {}
        for p in params:
            wanted[p.name] = out.get(p.name, np.zeros_like(p.data))
        return wanted
    return out


def checkpoint(segment: Callable[..., Tensor], *inputs: Tensor) -> Tensor:
    """Run ``segment`` keeping only its inputs; recompute it during backward.

    ``segment`` must be deterministic in its inputs. Tensors it closes over
    (e.g. model weights) still receive gradients.
    """
    tape = current_tape()
    if tape is None:
        with no_grad():
            return segment(*inputs)

    # probe run to discover closed-over tensors; its graph is dropped
    probe = Tape()
    with probe:
        probe_out = segment(*inputs)
    external = _external_inputs(probe, probe_out)
    del probe
    explicit_uids = {t.uid for t in inputs}
    closure = tuple(t for t in external if t.uid not in explicit_uids)
    values = probe_out.data
    digest = _digest(values)
    all_inputs = tuple(inputs) + closure

    def vjp(g):
        fresh = tuple(Tensor._wrap(t.data) for t in inputs)
        for f, t in zip(fresh, inputs):
            f.requires_grad = t.requires_grad
        inner = Tape()
        with inner:
            rec = segment(*fresh)
        if _digest(rec.data) != digest:
            raise NondeterminismError(f"checkpoint segment recomputation differs (node {node_id})")
        ext = _backprop(inner, rec, g, keep_parts=True)
        res = [ext.get(f.uid, (None, None))[1] for f in fresh]
        res += [ext.get(t.uid, (None, None))[1] for t in closure]
        return tuple(res)

    node_id = len(tape.nodes)
    return _emit("checkpoint", values, all_inputs, vjp, saved=len(inputs))


def _external_inputs(tape: Tape, out: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    if out._tape is not tape:
        if out.requires_grad:
            seen[out.uid] = out
        return list(seen.values())
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t._tape is not tape and t.uid not in seen:
                seen[t.uid] = t
    return list(seen.values())
