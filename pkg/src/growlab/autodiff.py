"""Reverse-mode automatic differentiation over dense numpy arrays.

A small tape engine: each operation returns a :class:`Tensor` holding the
result array, references to its parents, and a closure that pushes the
output gradient back to them. ``Tensor.backward()`` walks the tape in
reverse topological order. There is no dtype promotion: an operation's
output dtype always matches its inputs, so the same graph runs in binary32
for training and binary64 for verification.

All operations are pure functions of their inputs; repeated evaluation of
the same graph on the same data is bit-identical.
"""

from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-5


class Tensor:
    """A node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self):
        """Seed a scalar output with gradient 1 and propagate to all leaves."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)


def _toposort(root):
    # Iterative DFS; closure graphs for deep models exceed no recursion limit
    # but we avoid relying on it.
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def leaf(data, requires_grad=True):
    """Wrap a raw array as a tape leaf."""
    return Tensor(np.asarray(data), requires_grad=requires_grad)


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data, parents, vjp):
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, parents=tuple(parents), vjp=vjp if rg else None)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    out_data = a.data * a.data.dtype.type(c)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * a.data.dtype.type(c))

    return _make(out_data, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; gradients un-broadcast over leading axes."""
    out_data = np.matmul(a.data, b.data)

    def vjp(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out_data, (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.transpose(a.data, axes)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inverse))

    return _make(out_data, (a,), vjp)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` (embedding); scatter-add on the way back."""
    out_data = table.data[ids]

    def vjp(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            table._accumulate(gt)

    return _make(out_data, (table,), vjp)


def slice_rows(a: Tensor, n: int) -> Tensor:
    """First ``n`` rows of a 2-d tensor (position-embedding prefix)."""
    out_data = a.data[:n]

    def vjp(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[:n] = g
            a._accumulate(ga)

    return _make(out_data, (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = centered * inv_std
    out_data = xhat * gain.data + shift.data

    def vjp(g):
        if shift.requires_grad:
            shift._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((gy - m1 - xhat * m2) * inv_std)

    return _make(out_data, (x, gain, shift), vjp)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))))."""
    dt = x.data.dtype.type
    c = dt(math.sqrt(2.0 / math.pi))
    a3 = dt(0.044715)
    u = c * (x.data + a3 * x.data**3)
    t = np.tanh(u)
    out_data = dt(0.5) * x.data * (dt(1.0) + t)

    def vjp(g):
        if x.requires_grad:
            du = c * (dt(1.0) + dt(3.0) * a3 * x.data * x.data)
            dgelu = dt(0.5) * (dt(1.0) + t) + dt(0.5) * x.data * (dt(1.0) - t * t) * du
            x._accumulate(g * dgelu)

    return _make(out_data, (x,), vjp)


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis with an upper-triangular causal mask.

    ``scores`` has shape (..., T, T); entry (i, j) with j > i is masked out
    by a large negative additive bias before the row softmax, which drives
    its probability to exactly zero in both binary32 and binary64.
    """
    t = scores.shape[-1]
    dt = scores.data.dtype.type
    neg = dt(-1e9)
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    shifted = np.where(mask, neg, scores.data)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        if scores.requires_grad:
            inner = (g * probs).sum(axis=-1, keepdims=True)
            scores._accumulate(probs * (g - inner))

    return _make(probs, (scores,), vjp)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy in nats from raw logits.

    ``logits`` is (N, V) after flattening; ``targets`` is (N,) int. Uses the
    fused log-softmax form; the backward pass is (softmax - onehot) / N.
    """
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    sum_e = e.sum(axis=-1, keepdims=True)
    log_probs = z - np.log(sum_e)
    nll = -log_probs[np.arange(n), targets]
    out_data = np.asarray(nll.mean(), dtype=logits.dtype)

    def vjp(g):
        if logits.requires_grad:
            gl = e / sum_e
            gl[np.arange(n), targets] -= 1.0
            gl *= g / logits.data.dtype.type(n)
            logits._accumulate(gl)

    return _make(out_data, (logits,), vjp)


def reduce_sum(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum(), dtype=a.dtype)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), vjp)


def reduce_mean(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.mean(), dtype=a.dtype)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g / a.data.dtype.type(a.data.size), a.shape).copy())

    return _make(out_data, (a,), vjp)
