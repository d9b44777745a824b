"""Reverse-mode array autodiff for the fixed retrieval architectures.

Every op accepts either `Node` operands (gradients tracked) or plain
ndarrays (the same formula evaluated eagerly, used on the serving path).
Both routes execute identical numpy expressions in identical order, so a
forward pass produces bit-identical values with or without gradients.
"""

from __future__ import annotations

import numpy as np

F = np.float64


def _as_value(x):
    return x.value if isinstance(x, Node) else x


def _any_node(*xs) -> bool:
    return any(isinstance(x, Node) for x in xs)


class Node:
    """A value in the computation graph plus how to push gradients back."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "sparse_grads", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=""):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.sparse_grads = None  # embedding leaves: list of (row_idx, grad_rows)
        self.name = name

    @staticmethod
    def param(value, name="", sparse=False) -> "Node":
        node = Node(np.ascontiguousarray(value, dtype=F), name=name)
        if sparse:
            node.sparse_grads = []
        return node

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def zero_grad(self):
        self.grad = None
        if self.sparse_grads is not None:
            self.sparse_grads = []

    def dense_grad(self) -> np.ndarray:
        """Gradient as a dense array; consolidates sparse rows for tables."""
        out = np.zeros_like(self.value) if self.grad is None else self.grad.copy()
        if self.sparse_grads:
            for idx, g in self.sparse_grads:
                np.add.at(out, idx, g)
        return out


def backward(root: Node, seed_grad=None) -> None:
    """Reverse accumulation from `root` through every reachable parent."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if isinstance(parent, Node) and id(parent) not in seen:
                stack.append((parent, False))
    if seed_grad is None:
        seed_grad = np.ones_like(root.value)
    root.accumulate(np.asarray(seed_grad, dtype=F))
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b, out, da, db):
    if not _any_node(a, b):
        return out

    def backward_fn(g):
        if isinstance(a, Node):
            a.accumulate(_unbroadcast(da(g), a.value.shape))
        if isinstance(b, Node):
            b.accumulate(_unbroadcast(db(g), b.value.shape))

    return Node(out, tuple(x for x in (a, b) if isinstance(x, Node)), backward_fn)


def add(a, b):
    av, bv = _as_value(a), _as_value(b)
    return _binary(a, b, av + bv, lambda g: g, lambda g: g)


def sub(a, b):
    av, bv = _as_value(a), _as_value(b)
    return _binary(a, b, av - bv, lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = _as_value(a), _as_value(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def scale(a, c: float):
    av = _as_value(a)
    out = av * c
    if not isinstance(a, Node):
        return out

    def backward_fn(g):
        a.accumulate(g * c)

    return Node(out, (a,), backward_fn)


def matmul(a, b):
    av, bv = _as_value(a), _as_value(b)
    out = av @ bv
    if not _any_node(a, b):
        return out

    def backward_fn(g):
        if isinstance(a, Node):
            a.accumulate(g @ bv.T)
        if isinstance(b, Node):
            b.accumulate(av.T @ g)

    return Node(out, tuple(x for x in (a, b) if isinstance(x, Node)), backward_fn)


def matmul_t(a, b):
    """a @ b.T for 2-D operands."""
    av, bv = _as_value(a), _as_value(b)
    out = av @ bv.T
    if not _any_node(a, b):
        return out

    def backward_fn(g):
        if isinstance(a, Node):
            a.accumulate(g @ bv)
        if isinstance(b, Node):
            b.accumulate(g.T @ av)

    return Node(out, tuple(x for x in (a, b) if isinstance(x, Node)), backward_fn)


def tile_rows(a, n: int):
    """(1,d) -> (n,d) view copy; gradient sums back over rows."""
    av = _as_value(a)
    out = np.broadcast_to(av, (n, av.shape[1])).copy()
    if not isinstance(a, Node):
        return out

    def backward_fn(g):
        a.accumulate(g.sum(axis=0, keepdims=True))

    return Node(out, (a,), backward_fn)


def sum_axis(a, axis: int):
    av = _as_value(a)
    out = av.sum(axis=axis)
    if not isinstance(a, Node):
        return out

    def backward_fn(g):
        a.accumulate(np.expand_dims(g, axis) * np.ones_like(av))

    return Node(out, (a,), backward_fn)


def gather_rows(a, idx):
    """Row gather from a computed matrix; backward scatter-adds."""
    av = _as_value(a)
    idx = np.asarray(idx)
    out = av[idx]
    if not isinstance(a, Node):
        return out

    def backward_fn(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.value)
        np.add.at(a.grad, idx, g)

    return Node(out, (a,), backward_fn)


def gather(table, idx):
    """Row lookup `table[idx]`; sparse gradient for embedding leaves."""
    tv = _as_value(table)
    idx = np.asarray(idx)
    out = tv[idx]
    if not isinstance(table, Node):
        return out

    def backward_fn(g):
        if table.sparse_grads is not None:
            table.sparse_grads.append((idx, g))
        else:
            if table.grad is None:
                table.grad = np.zeros_like(table.value)
            np.add.at(table.grad, idx, g)

    return Node(out, (table,), backward_fn)


def reshape(a, shape):
    av = _as_value(a)
    out = av.reshape(shape)
    if not isinstance(a, Node):
        return out

    def backward_fn(g):
        a.accumulate(g.reshape(av.shape))

    return Node(out, (a,), backward_fn)


def concat(parts, axis=1):
    values = [_as_value(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    if not _any_node(*parts):
        return out
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(part, Node):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                part.accumulate(g[tuple(sl)])

    return Node(out, tuple(p for p in parts if isinstance(p, Node)), backward_fn)


def leaky_relu(a, alpha=0.1):
    av = _as_value(a)
    out = np.where(av > 0, av, alpha * av)
    if not isinstance(a, Node):
        return out

    def backward_fn(g):
        a.accumulate(g * np.where(av > 0, 1.0, alpha))

    return Node(out, (a,), backward_fn)


def sigmoid(a):
    av = _as_value(a)
    out = 1.0 / (1.0 + np.exp(-np.abs(av)))
    out = np.where(av >= 0, out, 1.0 - out)
    if not isinstance(a, Node):
        return out

    def backward_fn(g):
        a.accumulate(g * out * (1.0 - out))

    return Node(out, (a,), backward_fn)


def softplus(a):
    av = _as_value(a)
    out = np.logaddexp(0.0, av)
    if not isinstance(a, Node):
        return out

    def backward_fn(g):
        s = 1.0 / (1.0 + np.exp(-np.abs(av)))
        s = np.where(av >= 0, s, 1.0 - s)
        a.accumulate(g * s)

    return Node(out, (a,), backward_fn)


def logistic_log1pexp(a):
    """log(1 + exp(-a)), stable for any margin."""
    av = _as_value(a)
    out = np.logaddexp(0.0, -av)
    if not isinstance(a, Node):
        return out

    def backward_fn(g):
        s = 1.0 / (1.0 + np.exp(-np.abs(av)))
        s = np.where(av >= 0, s, 1.0 - s)  # sigmoid(a)
        a.accumulate(g * (s - 1.0))

    return Node(out, (a,), backward_fn)


def square(a):
    av = _as_value(a)
    out = av * av
    if not isinstance(a, Node):
        return out

    def backward_fn(g):
        a.accumulate(g * (2.0 * av))

    return Node(out, (a,), backward_fn)


def mean(a):
    av = _as_value(a)
    out = np.asarray(av.mean())
    if not isinstance(a, Node):
        return out
    inv = 1.0 / av.size

    def backward_fn(g):
        a.accumulate(np.full_like(av, float(g) * inv))

    return Node(out, (a,), backward_fn)


def total(a):
    av = _as_value(a)
    out = np.asarray(av.sum())
    if not isinstance(a, Node):
        return out

    def backward_fn(g):
        a.accumulate(np.full_like(av, float(g)))

    return Node(out, (a,), backward_fn)


def masked_softmax(scores, mask):
    """Softmax over the last axis restricted to `mask`; all-masked rows -> 0.

    `mask` is a constant boolean array, never differentiated.
    """
    sv = _as_value(scores)
    neg = np.where(mask, sv, -np.inf)
    peak = np.max(neg, axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    ex = np.where(mask, np.exp(neg - peak), 0.0)
    denom = ex.sum(axis=-1, keepdims=True)
    out = np.divide(ex, denom, out=np.zeros_like(ex), where=denom > 0)
    if not isinstance(scores, Node):
        return out

    def backward_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        scores.accumulate(out * (g - dot))

    return Node(out, (scores,), backward_fn)


def qk_scores(q, keys):
    """(B,d) x (B,L,d) -> (B,L) per-sample dot products."""
    qv, kv = _as_value(q), _as_value(keys)
    out = np.einsum("bd,bld->bl", qv, kv, optimize=True)
    if not _any_node(q, keys):
        return out

    def backward_fn(g):
        if isinstance(q, Node):
            q.accumulate(np.einsum("bl,bld->bd", g, kv, optimize=True))
        if isinstance(keys, Node):
            keys.accumulate(qv[:, None, :] * g[:, :, None])

    return Node(out, tuple(x for x in (q, keys) if isinstance(x, Node)), backward_fn)


def attn_mix(weights, values):
    """(B,L) x (B,L,d) -> (B,d) attention-weighted sum."""
    wv, vv = _as_value(weights), _as_value(values)
    out = np.einsum("bl,bld->bd", wv, vv, optimize=True)
    if not _any_node(weights, values):
        return out

    def backward_fn(g):
        if isinstance(weights, Node):
            weights.accumulate(np.einsum("bd,bld->bl", g, vv, optimize=True))
        if isinstance(values, Node):
            values.accumulate(wv[:, :, None] * g[:, None, :])

    return Node(out, tuple(x for x in (weights, values) if isinstance(x, Node)), backward_fn)


def seq_linear(e, w):
    """(B,L,d) @ (d,m) -> (B,L,m)."""
    ev, wv = _as_value(e), _as_value(w)
    B, L, d = ev.shape
    flat = ev.reshape(B * L, d)
    out = (flat @ wv).reshape(B, L, -1)
    if not _any_node(e, w):
        return out

    def backward_fn(g):
        gf = g.reshape(B * L, -1)
        if isinstance(e, Node):
            e.accumulate((gf @ wv.T).reshape(B, L, d))
        if isinstance(w, Node):
            w.accumulate(flat.T @ gf)

    return Node(out, tuple(x for x in (e, w) if isinstance(x, Node)), backward_fn)


def masked_mean_pool(e, mask):
    """(B,L,d) pooled over valid positions of `mask` (B,L); empty rows -> 0."""
    ev = _as_value(e)
    m = mask.astype(F)
    counts = m.sum(axis=1)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    out = np.einsum("bl,bld->bd", m, ev, optimize=True) * inv[:, None]
    if not isinstance(e, Node):
        return out

    def backward_fn(g):
        e.accumulate(m[:, :, None] * (g * inv[:, None])[:, None, :])

    return Node(out, (e,), backward_fn)
