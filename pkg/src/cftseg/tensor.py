"""Dense float64 tensors with reverse-mode differentiation.

Operations execute eagerly on numpy arrays. When gradients are enabled,
every op leaves an `OpRecord` behind; `backward` collects the records
reachable from a scalar loss into a topologically ordered `Tape` and
replays it in reverse, accumulating gradients in a fixed order so the
result is bit-reproducible for a given graph.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ShapeError

Array = np.ndarray

_GRAD_ENABLED = True

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context; forward values only."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class OpRecord:
    """One recorded operation: its inputs, output, and backward rule.

    `backward` maps the output gradient to a sequence of input gradients
    aligned with `inputs`; entries may be None for inputs that do not
    need a gradient.
    """

    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op: str, inputs: tuple, out: "Tensor",
                 backward: Callable[[Array], Sequence[Array | None]]):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward

    def __repr__(self):
        return f"OpRecord({self.op}, n_inputs={len(self.inputs)})"


class Tape:
    """Op records in topological order: inputs precede their consumers."""

    __slots__ = ("records",)

    def __init__(self, records: list[OpRecord]):
        self.records = records

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[OpRecord]:
        return iter(self.records)


class Tensor:
    """A dense n-d array of float64 values, optionally tracked on the tape.

    Tensors are treated as immutable once created; the training harness
    is the only place that rewrites parameter storage, and it does so
    between backward passes.
    """

    __slots__ = ("data", "requires_grad", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.op = None

    @classmethod
    def _result(cls, data: Array, inputs: tuple, op: str,
                backward: Callable[[Array], Sequence[Array | None]]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
        out.op = OpRecord(op, inputs, out, backward) if out.requires_grad else None
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; the module-level functions hold the real rules
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return rsub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _as_scalar(x) -> float | None:
    if isinstance(x, (int, float, np.integer, np.floating)):
        return float(x)
    return None


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ "
                         "(only same-shape or scalar operands are supported)")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return Tensor._result(a.data + s, (a,), "add_const", lambda g: (g,))
    _check_same_shape("add", a, b)
    return Tensor._result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return Tensor._result(a.data - s, (a,), "sub_const", lambda g: (g,))
    _check_same_shape("sub", a, b)
    return Tensor._result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def rsub(a: Tensor, s) -> Tensor:
    """s - a for a python scalar s."""
    sv = _as_scalar(s)
    if sv is None:
        raise ShapeError("rsub expects a scalar left operand")
    return Tensor._result(sv - a.data, (a,), "rsub_const", lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return Tensor._result(a.data * s, (a,), "scale", lambda g: (g * s,))
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    return mul(a, float(s))


def div(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return mul(a, 1.0 / s)
    _check_same_shape("div", a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return g / bd, -g * ad / (bd * bd)

    return Tensor._result(ad / bd, (a, b), "div", bwd)


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), "neg", lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return Tensor._result(y, (a,), "exp", lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(np.log(ad), (a,), "log", lambda g: (g / ad,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p; for non-integer p the base must be positive."""
    p = float(p)
    ad = a.data
    return Tensor._result(ad ** p, (a,), "power",
                          lambda g: (g * p * ad ** (p - 1.0),))


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    y = np.empty_like(ad)
    pos = ad >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ez = np.exp(ad[~pos])
    y[~pos] = ez / (1.0 + ez)
    return Tensor._result(y, (a,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def logsigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(a)), evaluated without overflow at either tail."""
    ad = a.data
    y = np.empty_like(ad)
    pos = ad >= 0
    y[pos] = -np.log1p(np.exp(-ad[pos]))
    y[~pos] = ad[~pos] - np.log1p(np.exp(ad[~pos]))

    def bwd(g):
        # d/dx log(sigmoid(x)) = sigmoid(-x)
        s = np.empty_like(ad)
        s[pos] = np.exp(-ad[pos]) / (1.0 + np.exp(-ad[pos]))
        s[~pos] = 1.0 / (1.0 + np.exp(ad[~pos]))
        return (g * s,)

    return Tensor._result(y, (a,), "logsigmoid", bwd)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form (the fixed choice everywhere)."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)

    def bwd(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * d,)

    return Tensor._result(0.5 * x * (1.0 + t), (a,), "gelu", bwd)


# ---------------------------------------------------------------------------
# matrix products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} @ {b.shape} do not agree")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return Tensor._result(ad @ bd, (a, b), "matmul", bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over a shared leading axis: (G,m,k) @ (G,k,n)."""
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"bmm expects 3-d operands, got {a.shape} @ {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return Tensor._result(ad @ bd, (a, b), "bmm", bwd)


# ---------------------------------------------------------------------------
# shape movement


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, Iterable) else (shape,)))
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), "reshape",
                          lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} are not a permutation of {a.ndim} dims")
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), "transpose",
                          lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    axis = axis % tensors[0].ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base):
            raise ShapeError("concat operands must share rank")
        if other[:axis] + other[axis + 1:] != base[:axis] + base[axis + 1:]:
            raise ShapeError(f"concat: shape {t.shape} does not match {tensors[0].shape} off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis),
                          tensors, "concat", bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis` starting at `start`."""
    axis = axis % a.ndim
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + length}] is outside axis {axis} "
                         f"of shape {a.shape}")
    idx = tuple(slice(None) if d != axis else slice(start, start + length)
                for d in range(a.ndim))
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return Tensor._result(np.ascontiguousarray(a.data[idx]), (a,), "narrow", bwd)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim) -> tuple[int, ...] | None:
    if axis is None:
        return None
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def bwd(g):
        if axes is None:
            return (np.broadcast_to(g, shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(ge, shape).copy(),)

    data = a.data.sum(axis=axes, keepdims=keepdims)
    return Tensor._result(np.asarray(data), (a,), "sum", bwd)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    count = a.size if axes is None else int(np.prod([shape[ax] for ax in axes]))

    def bwd(g):
        if axes is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(ge / count, shape).copy(),)

    data = a.data.mean(axis=axes, keepdims=keepdims)
    return Tensor._result(np.asarray(data), (a,), "mean", bwd)


# ---------------------------------------------------------------------------
# backward


def trace(loss: Tensor) -> Tape:
    """Collect the records reachable from `loss` in topological order."""
    records: list[OpRecord] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            records.append(t.op)
            continue
        if id(t) in seen or t.op is None or not t.requires_grad:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in reversed(t.op.inputs):
            stack.append((inp, False))
    return Tape(records)


def backward(loss: Tensor, leaves: Sequence[Tensor] | None = None) -> dict[Tensor, Array]:
    """Differentiate a scalar loss through the recorded tape.

    Returns a map from each grad-enabled leaf tensor reached by the
    sweep to its gradient array. If `leaves` is given, the map contains
    exactly those tensors, with zero arrays for any the loss does not
    touch. Accumulation walks the tape in a fixed reverse order, so the
    result is deterministic for a given graph.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = trace(loss)
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, Array] = {}
    if loss.op is None and loss.requires_grad:
        leaf_grads[loss] = grads[id(loss)]
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.op is None:
                if inp in leaf_grads:
                    leaf_grads[inp] = leaf_grads[inp] + gi
                else:
                    leaf_grads[inp] = gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    if leaves is not None:
        return {t: leaf_grads.get(t, np.zeros(t.shape)) for t in leaves}
    return leaf_grads
