"""A small reverse-mode autodiff engine over numpy arrays.

Operations performed inside an active :class:`Tape` on tensors that require
gradients are recorded in creation order; :meth:`Tape.backward` walks that
record in reverse, so every recorded node is visited exactly once. Outside a
tape the same functions run as plain numpy code.

Storage dtype follows the inputs: parameters are float32 for training and can
be cast to float64 for finite-difference checks.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ShapeError

LAYER_NORM_EPS = 1e-5

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Records differentiable operations; use as a context manager."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)
                # intermediate gradients are no longer needed
                if node is not loss:
                    node.grad = None


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))
    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accum(a, -g))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: _accum(a, g * c))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: _accum(a, g * mask))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: _accum(a, g * y * (1 - y)))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0, x).astype(x.dtype)
    return _make(y, (a,), lambda g: _accum(a, g * _sigmoid(x)))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: _accum(a, g / x))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: _accum(a, g * y))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def dropout(a: Tensor, mask: np.ndarray | None) -> Tensor:
    """Multiply by a precomputed (already rescaled) mask; ``None`` is identity."""
    if mask is None:
        return a
    mask = np.asarray(mask, dtype=a.dtype)
    if mask.shape != a.shape:
        raise ShapeError(f"dropout mask {mask.shape} does not match {a.shape}")
    return _make(a.data * mask, (a,), lambda g: _accum(a, g * mask))


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray | None:
    if rate <= 0:
        return None
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


# ---------------------------------------------------------------------------
# shape / linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bw)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    y = a.data.sum(axis=axis)
    shape = a.shape

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), shape))
    return _make(np.asarray(y, dtype=a.dtype), (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = max(a.data.size, 1)
    return scale(sum(a), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(old)))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        y = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, sizes, axis=axis)):
            _accum(p, gp)
    return _make(y, parts, bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=a.dtype)
        full[:, start:stop] = g
        _accum(a, full)
    return _make(a.data[:, start:stop], (a,), bw)


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError("gather_rows index out of range")
    shape = a.shape

    def bw(g):
        if a.requires_grad:
            full = np.zeros(shape, dtype=a.dtype)
            np.add.at(full, idx, g)
            _accum(a, full)
    return _make(a.data[idx], (a,), bw)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Row-wise standardization followed by a learned scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def bw(g):
        _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
        _accum(beta, _unbroadcast(g, beta.shape))
        if a.requires_grad:
            gx = g * gamma.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(a, dx)
    return _make(y.astype(x.dtype), (a, gamma, beta), bw)


# ---------------------------------------------------------------------------
# segment operations
# ---------------------------------------------------------------------------

class Segments:
    """Maps rows to segment ids; caches the sparse reduction matrix."""

    def __init__(self, ids, num_segments: int | None = None):
        self.ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if num_segments is None:
            num_segments = int(self.ids.max()) + 1 if self.ids.size else 0
        self.n = int(num_segments)
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.n):
            raise IndexError("segment id out of range")
        self._matrix = None
        self._order = None

    def __len__(self) -> int:
        return self.ids.size

    @property
    def matrix(self) -> sp.csr_matrix:
        if self._matrix is None:
            m = len(self.ids)
            self._matrix = sp.csr_matrix((np.ones(m), (self.ids, np.arange(m))), shape=(self.n, m))
        return self._matrix

    def reduce_sum(self, x: np.ndarray) -> np.ndarray:
        out = self.matrix @ x.astype(np.float64, copy=False)
        return np.asarray(out, dtype=x.dtype)

    def reduce_max(self, x: np.ndarray) -> np.ndarray:
        if self._order is None:
            order = np.argsort(self.ids, kind="stable")
            sorted_ids = self.ids[order]
            starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]]) if len(order) else np.zeros(0, np.int64)
            self._order = (order, starts, sorted_ids[starts] if len(order) else starts)
        order, starts, present = self._order
        out = np.full((self.n,) + x.shape[1:], -np.inf, dtype=x.dtype)
        if len(order):
            out[present] = np.maximum.reduceat(x[order], starts, axis=0)
        return out


def _seg(seg) -> Segments:
    return seg if isinstance(seg, Segments) else Segments(seg)


def segment_sum(a: Tensor, seg) -> Tensor:
    """Sum rows sharing a segment id; empty segments give zeros."""
    seg = _seg(seg)
    if a.shape[0] != len(seg):
        raise ShapeError(f"segment_sum: {a.shape[0]} rows vs {len(seg)} segment ids")
    y = seg.reduce_sum(a.data)
    return _make(y, (a,), lambda g: _accum(a, g[seg.ids]))


def segment_softmax(a: Tensor, seg) -> Tensor:
    """Softmax over a 1-D score vector within each segment."""
    seg = _seg(seg)
    x = a.data
    if x.ndim != 1 or x.shape[0] != len(seg):
        raise ShapeError(f"segment_softmax expects 1-D scores aligned with segment ids, got {x.shape}")
    if not x.size:
        return _make(x.copy(), (a,), lambda g: None)
    mx = seg.reduce_max(x)
    e = np.exp(x - mx[seg.ids])
    z = seg.reduce_sum(e)
    y = e / z[seg.ids]

    def bw(g):
        s = seg.reduce_sum(g * y)
        _accum(a, y * (g - s[seg.ids]))
    return _make(y.astype(x.dtype), (a,), bw)


def segment_logsumexp(a: Tensor, seg) -> Tensor:
    """log-sum-exp of a 1-D vector within each segment; empty segments give 0."""
    seg = _seg(seg)
    x = a.data
    if x.ndim != 1 or x.shape[0] != len(seg):
        raise ShapeError(f"segment_logsumexp expects 1-D scores aligned with segment ids, got {x.shape}")
    mx = seg.reduce_max(x)
    safe = np.where(np.isfinite(mx), mx, 0)
    e = np.exp(x - safe[seg.ids]) if x.size else x
    z = seg.reduce_sum(e)
    nonempty = z > 0
    y = np.where(nonempty, safe + np.log(np.where(nonempty, z, 1)), 0).astype(x.dtype)

    def bw(g):
        p = e / z[seg.ids]
        _accum(a, p * g[seg.ids])
    return _make(y, (a,), bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def numeric_grad(fn: Callable[[], float], t: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of ``fn`` with respect to ``t.data``."""
    g = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Infinity-norm relative error ``|a-n|_inf / max(|a|_inf, |n|_inf, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / denom)


def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must rebuild the computation from ``params`` on every call and
    be deterministic (fixed dropout masks, fixed sampling decisions).
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        return float(loss_fn().data)

    worst = 0.0
    for p, a in zip(params, analytic):
        worst = max(worst, relative_error(a, numeric_grad(value, p, h)))
    return worst
