"""Dense float64 tensors with a reverse-mode differentiation tape.

Every operation that touches a tensor with ``requires_grad`` records its
parents and a backward rule on the output tensor. :func:`backward` orders the
recorded operations topologically into a :class:`Tape` and walks it once in
reverse, accumulating gradients into the ``grad`` buffers of leaf tensors.

Graph-structured operations (gather, segment sum/max/softmax, sparse
aggregation) take a :class:`Segments` object that maps rows onto groups, so the
message-passing layers stay edge-list based and never build dense adjacency.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation's contract."""


class EmptyAxisError(ValueError):
    """Raised when a normalizing reduction is asked to run over an empty axis."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array plus optional gradient bookkeeping.

    Leaf tensors created with ``requires_grad=True`` own a zero-initialised
    ``grad`` buffer of the same shape. Tensors produced by operations keep a
    reference to their parents and the rule mapping the output gradient back
    onto them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Operations reachable from a root, in topological (inputs-first) order."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every participating leaf's ``grad``."""
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    Tape(root).run(np.ones_like(root.data))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return Tensor._result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return Tensor._result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return Tensor._result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def trace(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"trace: expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    return Tensor._result(np.array(np.trace(a.data)), (a,), lambda g: (g * np.eye(n),), "trace")


def frobenius_norm(a) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise EmptyAxisError(f"frobenius_norm: empty input of shape {a.shape}")
    out = np.sqrt(np.sum(a.data * a.data))

    def bw(g):
        if out == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / out,)

    return Tensor._result(np.array(out), (a,), bw, "frobenius_norm")


def logdet(a) -> Tensor:
    """log det of a matrix with positive determinant."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"logdet: expected a square matrix, got shape {a.shape}")
    sign, ld = np.linalg.slogdet(a.data)
    if sign <= 0:
        raise ValueError("logdet: matrix determinant is not positive")
    return Tensor._result(np.array(ld), (a,), lambda g: (g * np.linalg.inv(a.data).T,), "logdet")


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return Tensor._result(out, (a,), lambda g: (g * (out > 0),), "relu")


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return Tensor._result(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    neg_part = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(a.data > 0, a.data, neg_part)
    deriv = np.where(a.data > 0, 1.0, neg_part + alpha)
    return Tensor._result(out, (a,), lambda g: (g * deriv,), "elu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    return Tensor._result(out, (a,), lambda g: (g * np.exp(-np.logaddexp(0.0, a.data)),), "log_sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return Tensor._result(out, (a,), bw, "sqrt")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data > lo
    return Tensor._result(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    a = as_tensor(a)
    if p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return Tensor._result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# reductions and normalisations


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise EmptyAxisError(f"mean: empty axis in shape {a.shape}")
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_rows(a) -> Tensor:
    """Elementwise max over the rows of a matrix; ties route to the first row."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] == 0:
        raise EmptyAxisError(f"max_rows: need a non-empty matrix, got shape {a.shape}")
    arg = np.argmax(a.data, axis=0)
    cols = np.arange(a.shape[1])

    def bw(g):
        out = np.zeros_like(a.data)
        out[arg, cols] = g
        return (out,)

    return Tensor._result(a.data[arg, cols], (a,), bw, "max_rows")


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.shape[-1] == 0:
        raise EmptyAxisError(f"softmax_rows: empty axis in shape {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return Tensor._result(out, (a,), bw, "softmax_rows")


def log_softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.shape[-1] == 0:
        raise EmptyAxisError(f"log_softmax_rows: empty axis in shape {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * np.sum(g, axis=-1, keepdims=True),)

    return Tensor._result(out, (a,), bw, "log_softmax_rows")


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return Tensor._result(out, ts, bw, "concat")


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(np.array(out, dtype=np.float64), (a,), bw, "index")


def batch_norm(x, gamma, beta, eps: float = 1e-5):
    """Training-mode batch normalisation over rows (the node axis).

    Returns the output tensor plus the batch mean and (biased) variance so the
    caller can maintain running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyAxisError(f"batch_norm: need a non-empty matrix, got shape {x.shape}")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: feature width {x.shape} vs affine {gamma.shape}, {beta.shape}")
    n = x.shape[0]
    mu = x.data.mean(axis=0)
    centered = x.data - mu
    var = np.einsum("ij,ij->j", centered, centered) / n
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g):
        dxhat = g * gamma.data
        gsum = g.sum(axis=0)
        gdot = np.einsum("ij,ij->j", g, xhat)
        dx = (inv_std * gamma.data / n) * (n * g - gsum - xhat * gdot)
        return dx, gdot, gsum

    return Tensor._result(out, (x, gamma, beta), bw, "batch_norm"), mu, var


def row_outer(a) -> Tensor:
    """Per-row outer product, flattened: (N, K) -> (N, K*K)."""
    a = as_tensor(a)
    n, k = a.shape
    out = (a.data[:, :, None] * a.data[:, None, :]).reshape(n, k * k)

    def bw(g):
        g3 = g.reshape(n, k, k)
        return (np.einsum("nij,nj->ni", g3, a.data) + np.einsum("nij,ni->nj", g3, a.data),)

    return Tensor._result(out, (a,), bw, "row_outer")


# ---------------------------------------------------------------------------
# graph-structured operations


class Segments:
    """Assignment of ``len(index)`` rows onto ``size`` groups.

    The (size x rows) 0/1 incidence matrix and the stable ordering by group are
    built lazily and cached, so one object can serve many layers of a batch.
    """

    def __init__(self, index, size: int):
        self.index = np.asarray(index, dtype=np.int64)
        self.size = int(size)
        if self.index.size and (self.index.min() < 0 or self.index.max() >= self.size):
            raise IndexError("Segments: index outside [0, size)")
        self._matrix = None
        self._sorted = None

    def __len__(self) -> int:
        return len(self.index)

    @property
    def matrix(self) -> sp.csr_matrix:
        if self._matrix is None:
            m = len(self.index)
            self._matrix = sp.csr_matrix(
                (np.ones(m), (self.index, np.arange(m))), shape=(self.size, m))
        return self._matrix

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.index, minlength=self.size)

    def sorted_view(self):
        """(order, starts, nonempty_group_ids) for reduceat-style reductions."""
        if self._sorted is None:
            order = np.argsort(self.index, kind="stable")
            idx_sorted = self.index[order]
            if len(order):
                change = np.flatnonzero(np.diff(idx_sorted)) + 1
                starts = np.concatenate([[0], change])
                groups = idx_sorted[starts]
            else:
                starts = np.zeros(0, dtype=np.int64)
                groups = np.zeros(0, dtype=np.int64)
            self._sorted = (order, starts, groups)
        return self._sorted


def gather_rows(a, seg: Segments) -> Tensor:
    """Row ``i`` of the output is row ``seg.index[i]`` of ``a``."""
    a = as_tensor(a)
    if a.shape[0] != seg.size:
        raise ShapeError(f"gather_rows: source has {a.shape[0]} rows, segments expect {seg.size}")
    return Tensor._result(a.data[seg.index], (a,), lambda g: (seg.matrix @ g,), "gather_rows")


def segment_sum(a, seg: Segments) -> Tensor:
    a = as_tensor(a)
    if a.shape[0] != len(seg):
        raise ShapeError(f"segment_sum: {a.shape[0]} rows vs {len(seg)} segment entries")
    out = seg.matrix @ a.data
    return Tensor._result(np.asarray(out), (a,), lambda g: (g[seg.index],), "segment_sum")


def segment_mean(a, seg: Segments) -> Tensor:
    counts = seg.counts.astype(np.float64)
    if np.any(counts == 0):
        raise EmptyAxisError("segment_mean: empty segment")
    shape = (-1,) + (1,) * (as_tensor(a).ndim - 1)
    return mul(segment_sum(a, seg), (1.0 / counts).reshape(shape))


def segment_max(a, seg: Segments) -> Tensor:
    """Per-group elementwise max of rows; empty groups yield zeros.

    Gradient flows to the first maximal row of each group and column.
    """
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != len(seg):
        raise ShapeError(f"segment_max: {a.shape} vs {len(seg)} segment entries")
    order, starts, groups = seg.sorted_view()
    d = a.shape[1]
    out = np.zeros((seg.size, d))
    if len(order) == 0:
        return Tensor._result(out, (a,), lambda g: (np.zeros_like(a.data),), "segment_max")
    xs = a.data[order]
    red = np.maximum.reduceat(xs, starts, axis=0)
    out[groups] = red
    is_max = xs == out[seg.index[order]]
    pos = np.where(is_max, np.arange(len(order))[:, None], len(order))
    first = np.minimum.reduceat(pos, starts, axis=0)
    rows = order[first]
    cols = np.broadcast_to(np.arange(d), rows.shape)

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, cols] = g[groups]
        return (full,)

    return Tensor._result(out, (a,), bw, "segment_max")


def segment_softmax(a, seg: Segments) -> Tensor:
    """Softmax over the rows of each group, independently per column."""
    a = as_tensor(a)
    if a.shape[0] != len(seg):
        raise ShapeError(f"segment_softmax: {a.shape[0]} rows vs {len(seg)} segment entries")
    x = a.data if a.ndim == 2 else a.data[:, None]
    order, starts, groups = seg.sorted_view()
    peak = np.zeros((seg.size, x.shape[1]))
    if len(order):
        peak[groups] = np.maximum.reduceat(x[order], starts, axis=0)
    e = np.exp(x - peak[seg.index])
    denom = np.asarray(seg.matrix @ e)
    out = e / denom[seg.index]

    def bw(g):
        g2 = g if a.ndim == 2 else g[:, None]
        inner = np.asarray(seg.matrix @ (g2 * out))
        dx = out * (g2 - inner[seg.index])
        return (dx if a.ndim == 2 else dx[:, 0],)

    return Tensor._result(out if a.ndim == 2 else out[:, 0], (a,), bw, "segment_softmax")


def spmm(matrix: sp.spmatrix, a, matrix_t: sp.spmatrix | None = None) -> Tensor:
    """Product of a constant sparse matrix with a tensor.

    ``matrix_t`` may supply a cached CSR transpose for the backward pass.
    """
    a = as_tensor(a)
    if matrix.shape[1] != a.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {matrix.shape} and {a.shape}")
    mt = matrix.T.tocsr() if matrix_t is None else matrix_t
    return Tensor._result(np.asarray(matrix @ a.data), (a,), lambda g: (np.asarray(mt @ g),), "spmm")


def edge_aggregate(weights, a, src: Segments, dst: Segments) -> Tensor:
    """out[v] = sum over edges e into v of weights[e] * a[src[e]].

    ``weights`` is a per-edge vector. The edge list must be sorted by
    destination so the weights line up with CSR storage order.
    """
    w, a = as_tensor(weights), as_tensor(a)
    if w.shape != (len(src),) or len(src) != len(dst):
        raise ShapeError(f"edge_aggregate: weights {w.shape} for {len(src)} edges")
    if a.shape[0] != src.size:
        raise ShapeError(f"edge_aggregate: features have {a.shape[0]} rows, graph has {src.size} nodes")
    indptr = np.concatenate([[0], np.cumsum(dst.counts)])
    mat = sp.csr_matrix((w.data, src.index, indptr), shape=(dst.size, src.size))

    def bw(g):
        gw = np.einsum("ij,ij->i", g[dst.index], a.data[src.index]) if w.requires_grad else None
        ga = np.asarray(mat.T @ g) if a.requires_grad else None
        return gw, ga

    return Tensor._result(np.asarray(mat @ a.data), (w, a), bw, "edge_aggregate")


# ---------------------------------------------------------------------------
# finite-difference checking


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"grad_check: non-finite value at coordinate {i}")
            out.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` must map ``x`` (a leaf with ``requires_grad``) to a scalar tensor.
    Other leaves reached by ``f`` receive gradients as a side effect.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"grad_check: step {h} outside [1e-7, 1e-4]")
    if not x.requires_grad:
        raise ValueError("grad_check: x must require grad")
    x.zero_grad()
    y = f(x)
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError("grad_check: non-finite value at x")
    backward(y)
    analytic = x.grad.copy()
    numeric = numeric_grad(f, x, h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
