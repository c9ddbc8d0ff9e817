"""A small reverse-mode differentiation engine over numpy arrays.

Each :class:`Tensor` stores a float64 value, an accumulated gradient and the
closure that maps its output gradient to gradients of its parents.  Only the
operations the model needs are provided.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: Sequence["Tensor"] = (),
        backward_fn: Optional[Callable] = None,
        requires_grad: bool = False,
        name: str = "",
    ) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        backward(self, grad)

    # operators
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)


def parameter(value, name: str = "") -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, parents, backward_fn, requires_grad=True)
    return Tensor(value)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every node requiring grad."""
    if not root.requires_grad:
        return
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value) if grad is None else np.asarray(grad, dtype=np.float64)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            p.grad = g if p.grad is None else p.grad + g
        if node.parents:
            # interior gradients are not needed after propagation
            node.grad = None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def square(x: Tensor) -> Tensor:
    return _node(x.value * x.value, (x,), lambda g: (2.0 * x.value * g,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    pick_a = a.value <= b.value
    return _node(
        np.where(pick_a, a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape), _unbroadcast(np.where(pick_a, 0.0, g), b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    on = x.value > 0
    return _node(np.where(on, x.value, 0.0), (x,), lambda g: (np.where(on, g, 0.0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.value
    v2 = v * v
    u = _GELU_C * v * (1.0 + 0.044715 * v2)
    th = np.tanh(u)
    out = 0.5 * v * (1.0 + th)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du),)

    return _node(out, (x,), bw)


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    x = logits.value
    t = np.asarray(target, dtype=np.float64)
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * (sig - t),)

    return _node(loss, (logits,), bw)


# ---------------------------------------------------------------- reductions and shape


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(x.value.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _scatter_rows(g: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``g`` into ``n`` rows by integer index (sort + reduceat)."""
    flat = idx.reshape(-1)
    g = g.reshape((flat.size,) + g.shape[idx.ndim :])
    out = np.zeros((n,) + g.shape[1:])
    if flat.size == 0:
        return out
    order = np.argsort(flat, kind="stable")
    sorted_idx = flat[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    out[sorted_idx[starts]] = np.add.reduceat(g[order], starts, axis=0)
    return out


def getitem(x: Tensor, key) -> Tensor:
    rows = isinstance(key, np.ndarray) and key.dtype.kind in "iu"

    def bw(g):
        if rows:
            return (_scatter_rows(g, key, x.shape[0]),)
        out = np.zeros_like(x.value)
        np.add.at(out, key, g)
        return (out,)

    return _node(x.value[key], (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([t.value for t in tensors], axis=axis), tensors, bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _node(a.value @ b.value, (a, b), bw)


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; ``mask`` False entries get exactly zero weight."""
    v = x.value if mask is None else np.where(mask, x.value, -np.inf)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _node(xhat, (x,), bw)


def segment_max(x: Tensor, seg: np.ndarray, n: int) -> Tensor:
    """Per-segment column maximum of rows of ``x``; ties route gradient to the first row.

    Segments with no rows yield -inf.
    """
    seg = np.asarray(seg, dtype=np.int64)
    rows, cols = x.shape
    out = np.full((n, cols), -np.inf)
    first = np.full((n, cols), rows, dtype=np.int64)
    if rows:
        order = np.argsort(seg, kind="stable")
        s_seg = seg[order]
        s_val = x.value[order]
        starts = np.flatnonzero(np.r_[True, s_seg[1:] != s_seg[:-1]])
        present = s_seg[starts]
        out[present] = np.maximum.reduceat(s_val, starts, axis=0)
        hit = s_val == out[s_seg]
        cand = np.where(hit, order[:, None], rows)
        first[present] = np.minimum.reduceat(cand, starts, axis=0)

    def bw(g):
        gx = np.zeros_like(x.value)
        ok = first < rows
        c = np.broadcast_to(np.arange(cols), (n, cols))
        gx[first[ok], c[ok]] = g[ok]
        return (gx,)

    return _node(out, (x,), bw)
