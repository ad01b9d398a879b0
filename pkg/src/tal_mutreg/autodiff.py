"""Minimal reverse-mode automatic differentiation over dense 64-bit arrays.

Tensors are rank 0, 1 or 2. Every op that touches a tensor with
``requires_grad=True`` records a node; nodes get a monotonically increasing id
at creation, so sorting the reachable nodes by id gives a topological order
without an explicit graph object.

Broadcasting is limited to scalar-with-tensor.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

_ids = itertools.count()
_kinks = threading.local()


class ShapeError(ValueError):
    pass


class EmptyReductionError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, _parents=(), _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 2:
            raise ShapeError(f"tensors are rank <= 2, got shape {self.data.shape}")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = _op
        self._parents = _parents
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        return backward(self)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: mul(self, 1.0 / _const(other))
    __neg__ = lambda self: mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(x):
    if isinstance(x, Tensor):
        if x.requires_grad:
            raise TypeError("division by a differentiable tensor is not supported")
        return x.data
    return np.asarray(x, dtype=np.float64)


def custom_op(data, parents, backward_fn, op):
    """Create an op output; records graph edges only if some parent needs grad.

    ``backward_fn(g)`` returns one gradient (or None) per parent.
    """
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    if needs:
        out._backward = backward_fn
    return out


def _check_broadcast(a, b, op):
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad, shape):
    # only scalar-with-tensor broadcasting exists, so reduce to a scalar or pass through
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum())


# --- kink bookkeeping for gradient checks ------------------------------------


@contextmanager
def record_kinks():
    """Collect the arguments of every non-differentiable point seen in forward ops.

    Yields a list that receives one flat array per kinked op, holding the
    signed distance of each element to its kink.
    """
    prev = getattr(_kinks, "log", None)
    log = []
    _kinks.log = log
    try:
        yield log
    finally:
        _kinks.log = prev


def kinks_active():
    return getattr(_kinks, "log", None) is not None


def note_kink(distance):
    log = getattr(_kinks, "log", None)
    if log is not None:
        log.append(np.ravel(distance).copy())


# --- elementwise --------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return custom_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return custom_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return custom_op(a.data * b.data, (a, b), bw, "mul")


def relu(x):
    x = as_tensor(x)
    note_kink(x.data)
    pos = x.data > 0

    def bw(g):
        return (g * pos,)

    return custom_op(np.where(pos, x.data, 0.0), (x,), bw, "relu")


def max_with_zero(x):
    """max(0, x) elementwise; subgradient 0 at x == 0."""
    x = as_tensor(x)
    note_kink(x.data)
    pos = x.data > 0

    def bw(g):
        return (g * pos,)

    return custom_op(np.where(pos, x.data, 0.0), (x,), bw, "max_with_zero")


def neg_min_with_zero(x):
    """-min(0, x) elementwise; subgradient 0 at x == 0."""
    x = as_tensor(x)
    note_kink(x.data)
    neg = x.data < 0

    def bw(g):
        return (-g * neg,)

    return custom_op(np.where(neg, -x.data, 0.0), (x,), bw, "neg_min_with_zero")


def absolute(x):
    x = as_tensor(x)
    note_kink(x.data)
    sign = np.sign(x.data)

    def bw(g):
        return (g * sign,)

    return custom_op(np.abs(x.data), (x,), bw, "abs")


def sigmoid(x):
    x = as_tensor(x)
    # split by sign to avoid overflow in exp
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        return (g * s * (1.0 - s),)

    return custom_op(s, (x,), bw, "sigmoid")


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value")

    def bw(g):
        return (g / x.data,)

    return custom_op(np.log(x.data), (x,), bw, "log")


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    x = as_tensor(x)
    note_kink(np.concatenate([np.ravel(x.data - lo), np.ravel(x.data - hi)]))
    inside = (x.data > lo) & (x.data < hi)

    def bw(g):
        return (g * inside,)

    return custom_op(np.clip(x.data, lo, hi), (x,), bw, "clip")


def smooth_l1(x):
    """0.5 x^2 where |x| < 1, else |x| - 0.5."""
    x = as_tensor(x)
    ax = np.abs(x.data)
    small = ax < 1.0

    def bw(g):
        return (g * np.where(small, x.data, np.sign(x.data)),)

    return custom_op(np.where(small, 0.5 * x.data**2, ax - 0.5), (x,), bw, "smooth_l1")


ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "abs": absolute,
    "add": add,
    "sub": sub,
    "mul": mul,
    "max_with_zero": max_with_zero,
    "neg_min_with_zero": neg_min_with_zero,
}


def elementwise(op, *operands):
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# --- structural ---------------------------------------------------------------


def take(x, index):
    """Basic (slice / integer) indexing. Basic indexing never repeats an element,
    so the backward is a plain scatter."""
    x = as_tensor(x)
    out = x.data[index]
    if np.ndim(out) > 2:
        raise ShapeError("indexing produced rank > 2")

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return custom_op(np.array(out, dtype=np.float64), (x,), bw, "take")


def pairwise_absdiff(p):
    """Matrix a[i, j] = |p_i - p_j| for a length-T vector."""
    p = as_tensor(p)
    if p.data.ndim != 1:
        raise ShapeError(f"pairwise_absdiff expects a vector, got {p.shape}")
    d = p.data[:, None] - p.data[None, :]
    note_kink(d[~np.eye(len(p.data), dtype=bool)])
    s = np.sign(d)

    def bw(g):
        gs = g * s
        return (gs.sum(axis=1) - gs.sum(axis=0),)

    return custom_op(np.abs(d), (p,), bw, "pairwise_absdiff")


# --- reductions ---------------------------------------------------------------


def reduce(op, x):
    x = as_tensor(x)
    if x.size == 0:
        raise EmptyReductionError(f"{op} over an empty tensor")
    if op == "sum":
        scale = 1.0
    elif op == "mean":
        scale = 1.0 / x.size
    else:
        raise ValueError(f"unknown reduction {op!r}")
    shape = x.shape

    def bw(g):
        return (np.full(shape, g * scale),)

    return custom_op(x.data.sum() * scale, (x,), bw, op)


def sum(x):  # noqa: A001 - mirrors numpy naming
    return reduce("sum", x)


def mean(x):
    return reduce("mean", x)


# --- convolution --------------------------------------------------------------


def conv1d(x, kernel, bias):
    """Same-length 1-D convolution.

    x: (T, C_in); kernel: the K x C_in x C_out weights flattened to
    (K*C_in, C_out), row k*C_in + c; bias: (C_out,).
    Zero padding of (K-1)/2 on each side; output (T, C_out).
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 2:
        raise ShapeError(f"conv1d input must be (T, C_in), got {x.shape}")
    T, c_in = x.shape
    kc, c_out = kernel.shape
    if kc % c_in:
        raise ShapeError(f"kernel rows {kc} not a multiple of input channels {c_in}")
    K = kc // c_in
    if K % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {K}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
    if T < 1:
        raise ShapeError("conv1d needs T >= 1")
    pad = (K - 1) // 2
    xp = np.zeros((T + 2 * pad, c_in))
    xp[pad : pad + T] = x.data
    cols = np.concatenate([xp[k : k + T] for k in range(K)], axis=1)
    out = cols @ kernel.data + bias.data

    def bw(g):
        gk = cols.T @ g if kernel.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g @ kernel.data.T).reshape(T, K, c_in)
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[k : k + T] += gcols[:, k]
            gx = gxp[pad : pad + T]
        return gx, gk, gb

    return custom_op(out, (x, kernel, bias), bw, "conv1d")


# --- backward -----------------------------------------------------------------


def _reachable(root):
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    return seen


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf.

    Calling twice without ``zero_grad`` adds the gradients again. Returns a
    dict mapping each reached leaf tensor to its accumulated gradient.
    """
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        raise BackwardError("backward needs a scalar tensor")
    if not loss.requires_grad:
        return {}
    nodes = _reachable(loss)
    grads = {loss._id: np.ones(())}
    leaves = {}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = np.asarray(pg, dtype=np.float64)
    return leaves
