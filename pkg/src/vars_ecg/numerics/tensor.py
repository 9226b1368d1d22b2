"""Dense float64 tensors with reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` records itself with a
monotonically increasing sequence number. ``backward`` gathers the recorded
ops reachable from the loss and replays their local gradients in exact
reverse recording order.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericOverflowError(FloatingPointError):
    """An op produced NaN or Inf from finite inputs."""


class ContractError(RuntimeError):
    """A call violated a documented precondition."""


_state = threading.local()
_seq = itertools.count()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the enclosed block (per thread)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(name: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(f"{name}: non-finite output (shape {out.shape})")


def _make(name: str, out: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    _check_finite(name, out)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.op = name
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    t.requires_grad = track
    if track:
        t._parents = tuple(parents)
        t._backward = backward
        t._seq = next(_seq)
    else:
        t._parents = ()
        t._backward = None
        t._seq = -1
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make("div", out, (a, b), back)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (last axis by default)."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat(axis={axis}): shapes {[t.shape for t in ts]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack 1-d tensors of equal length into a matrix."""
    rows = [reshape(as_tensor(v), (1, -1)) for v in vectors]
    return concat(rows, axis=0)


# ----------------------------------------------------------------- unary ops

def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericOverflowError("log: non-positive input")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    with np.errstate(all="ignore"):
        out = np.power(a.data, p)
    return _make("power", out, (a,), lambda g: (g * p * np.power(a.data, p - 1.0),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (a,), back)


def log_softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _make("log_softmax", out, (a,),
                 lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


# -------------------------------------------------------------- reductions

def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), back)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def mean_rows(a) -> Tensor:
    """Average over rows of a matrix, giving a 1-d vector."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] == 0:
        raise ShapeError(f"mean_rows: expected a non-empty matrix, got {a.shape}")
    return mean(a, axis=0)


# ---------------------------------------------------------------- indexing

def take_rows(a, idx) -> Tensor:
    """Gather rows ``a[idx]``; gradients scatter-add back."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("take_rows", a.data[idx], (a,), back)


def scatter_matrix(values, rows, cols, shape: tuple[int, int]) -> Tensor:
    """Place a 1-d tensor of values at (rows, cols) of a zero matrix."""
    values = as_tensor(values)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = np.zeros(shape)
    out[rows, cols] = values.data
    return _make("scatter", out, (values,), lambda g: (g[rows, cols],))


def gather_matrix(a, rows, cols) -> Tensor:
    """Pick entries ``a[rows[k], cols[k]]`` into a 1-d tensor."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _make("gather", a.data[rows, cols], (a,), back)


def logsumexp_rows(a, mask: np.ndarray | None = None) -> Tensor:
    """``log(sum(exp(a)))`` over the last axis, restricted to ``mask`` when given.

    Each row needs at least one unmasked entry.
    """
    a = as_tensor(a)
    keep = np.ones(a.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not np.all(keep.any(axis=-1)):
        raise ContractError("logsumexp_rows: a row has no unmasked entries")
    masked = np.where(keep, a.data, -np.inf)
    top = masked.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(masked - top), 0.0)
    tot = e.sum(axis=-1, keepdims=True)
    out = (np.log(tot) + top)[..., 0]
    weights = e / tot
    return _make("logsumexp", out, (a,), lambda g: (weights * g[..., None],))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) = -softplus(-a), exact for any finite input."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    sig_neg = np.exp(out - x)  # sigmoid(-x) = exp(log_sigmoid(x) - x)
    return _make("log_sigmoid", out, (a,), lambda g: (g * sig_neg,))


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on raw logits (numerically stable)."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    x = logits.data
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make("bce", out, (logits,), lambda g: (g * (sig - y),))


# ------------------------------------------------------------- similarity

def l2_normalize_rows(a) -> Tensor:
    a = as_tensor(a)
    norms = np.sqrt((a.data ** 2).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise ContractError("l2_normalize_rows: zero-norm row")
    out = a.data / norms

    def back(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norms,)

    return _make("l2_normalize", out, (a,), back)


def cosine_rows(a, b) -> Tensor:
    """Row-wise cosine similarity of two equally shaped matrices.

    Rows where either side has zero norm yield 0 and pass no gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_rows: shapes differ {a.shape} vs {b.shape}")
    x, y = a.data, b.data
    nx = np.sqrt((x * x).sum(axis=-1))
    ny = np.sqrt((y * y).sum(axis=-1))
    ok = (nx > 0) & (ny > 0)
    safe = np.where(ok, nx * ny, 1.0)
    dot = (x * y).sum(axis=-1)
    out = np.where(ok, dot / safe, 0.0)

    def back(g):
        g = np.where(ok, g, 0.0)[..., None]
        snx = np.where(ok, nx, 1.0)[..., None]
        sny = np.where(ok, ny, 1.0)[..., None]
        c = out[..., None]
        ga = g * (y / (snx * sny) - c * x / snx ** 2)
        gb = g * (x / (snx * sny) - c * y / sny ** 2)
        return ga, gb

    return _make("cosine", out, (a, b), back)


# ---------------------------------------------------------------- backward

class Tape:
    """Recorded ops reachable from one output, in recording order."""

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    @classmethod
    def from_output(cls, out: Tensor) -> Tape:
        seen: set[int] = set()
        ops: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            ops.append(t)
            stack.extend(t._parents)
        ops.sort(key=lambda t: t._seq)
        return cls(ops)

    def __len__(self) -> int:
        return len(self.ops)


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves passed in ``params`` that the loss does not depend on get a zero
    gradient instead of ``None``.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    for p in params:
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.ops):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
