"""Minimal reverse-mode autodiff over numpy arrays.

The computation graphs built by this library are fixed per model
configuration, so a small closed set of differentiable ops is enough:
elementwise arithmetic, matmul, reductions, concatenation/slicing,
pointwise activations, cumulative sums (for transmittance) and a
gather-with-weights op that covers every grid/table lookup.

Gradients are accumulated with respect to parameter leaves only;
coordinates and targets enter the graph as constants.
"""

from __future__ import annotations

import numpy as np


class Node:
    """One value in the computation graph.

    ``parents`` is a tuple of ``(node, vjp)`` pairs where ``vjp`` maps the
    upstream gradient to the gradient contribution for that parent.
    """

    __slots__ = ("value", "parents", "grad", "param")

    def __init__(self, value, parents=(), param=None):
        self.value = np.asarray(value)
        self.parents = parents
        self.grad = None
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    # operator sugar -------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def wrap(x) -> Node:
    """Wrap a constant as a leaf node (no-op for nodes)."""
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` to undo numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    return Node(
        a.value + b.value,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ),
    )


def sub(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    return Node(
        a.value - b.value,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ),
    )


def mul(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    return Node(
        a.value * b.value,
        (
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ),
    )


def square(a) -> Node:
    a = wrap(a)
    return Node(a.value * a.value, ((a, lambda g: g * (2.0 * a.value)),))


def matmul(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    return Node(
        a.value @ b.value,
        (
            (a, lambda g: g @ b.value.T),
            (b, lambda g: a.value.T @ g),
        ),
    )


def concat(nodes, axis: int = -1) -> Node:
    nodes = [wrap(n) for n in nodes]
    values = [n.value for n in nodes]
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate(values, axis=axis)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return Node(out, tuple((n, make_vjp(i)) for i, n in enumerate(nodes)))


def getitem(a, key) -> Node:
    a = wrap(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[key] = g
        return out

    return Node(a.value[key], ((a, vjp),))


def reshape(a, shape) -> Node:
    a = wrap(a)
    return Node(a.value.reshape(shape), ((a, lambda g: g.reshape(a.value.shape)),))


def nsum(a, axis=None, keepdims: bool = False) -> Node:
    a = wrap(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.value.shape).copy()

    return Node(out, ((a, vjp),))


def nmean(a, axis=None) -> Node:
    a = wrap(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(nsum(a, axis=axis), 1.0 / n)


def relu(a) -> Node:
    a = wrap(a)
    mask = a.value > 0
    return Node(a.value * mask, ((a, lambda g: g * mask),))


def softplus(a) -> Node:
    a = wrap(a)
    v = a.value
    out = np.where(v > 0, v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    sig = 1.0 / (1.0 + np.exp(-v))
    return Node(out, ((a, lambda g: g * sig),))


def sigmoid(a) -> Node:
    a = wrap(a)
    out = 1.0 / (1.0 + np.exp(-a.value))
    return Node(out, ((a, lambda g: g * (out * (1.0 - out))),))


def exp(a) -> Node:
    a = wrap(a)
    out = np.exp(a.value)
    return Node(out, ((a, lambda g: g * out),))


def cumsum(a, axis: int) -> Node:
    a = wrap(a)
    out = np.cumsum(a.value, axis=axis)

    def vjp(g):
        rev = np.flip(g, axis=axis)
        return np.flip(np.cumsum(rev, axis=axis), axis=axis)

    return Node(out, ((a, vjp),))


def weighted_gather(table, idx: np.ndarray, weights: np.ndarray) -> Node:
    """Weighted sum of table rows: ``out[b] = sum_j w[b,j] * table[idx[b,j]]``.

    ``table`` has shape (rows, channels); ``idx`` and ``weights`` have shape
    (batch, corners). Backward scatters ``g * w`` into the table rows, which
    makes d(out)/d(row) equal the interpolation weight exactly.
    """
    table = wrap(table)
    gathered = table.value[idx]  # (B, J, C)
    out = np.einsum("bj,bjc->bc", weights, gathered)

    def vjp(g):
        rows, channels = table.value.shape
        contrib = g[:, None, :] * weights[:, :, None]
        # bincount-based scatter-add: much faster than np.add.at.
        flat_idx = (idx[:, :, None] * channels + np.arange(channels)).reshape(-1)
        gt = np.bincount(flat_idx, weights=contrib.reshape(-1), minlength=rows * channels)
        return gt.reshape(rows, channels).astype(table.value.dtype, copy=False)

    return Node(out, ((table, vjp),))


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(param) into every reachable parameter's grad."""
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise ValueError("backward expects a scalar loss node")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            pg = vjp(g)
            if parent.grad is None:
                parent.grad = pg
            else:
                parent.grad = parent.grad + pg
        if node.param is not None and node.param.learnable:
            node.param.grad += g
