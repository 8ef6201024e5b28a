"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records primitive operations as they execute; ``backward`` replays
the tape in reverse and accumulates exact analytic gradients into the leaves.
Tensors are plain numpy float64 arrays wrapped in lightweight ``Node`` objects.
Leading batch dimensions broadcast through ``matmul``/``add``/``mul`` the way
numpy's stacked operators do, which is what lets a whole batch of sentences run
through the encoder as one recorded graph.

Tapes are single-threaded; concurrent episodes each build their own tape.
Backward visits every recorded node at most once, in reverse recording order,
so reductions are deterministic.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes incompatible for the named operation."""


class Node:
    __slots__ = ("value", "parents", "grad_fns", "rg", "idx")

    def __init__(self, value, parents, grad_fns, rg, idx):
        self.value = value
        self.parents = parents
        self.grad_fns = grad_fns
        self.rg = rg
        self.idx = idx

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(idx={self.idx}, shape={self.value.shape}, rg={self.rg})"


def _as_f64(value):
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _unbroadcast(g, shape):
    """Sum g over the axes numpy broadcasting introduced relative to shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _rows(x):
    """View an (..., D) array as (R, D) C-contiguous rows."""
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


class Tape:
    """Ordered record of primitive operations plus their leaf tensors."""

    def __init__(self):
        self._nodes: list[Node] = []
        self.leaves: list[Node] = []

    def __len__(self):
        return len(self._nodes)

    def _record(self, value, parents=(), grad_fns=(), rg=None):
        if rg is None:
            rg = any(p.rg for p in parents)
        node = Node(value, tuple(parents), tuple(grad_fns), rg, len(self._nodes))
        self._nodes.append(node)
        return node

    # ------------------------------------------------------------------ leaves

    def leaf(self, value) -> Node:
        """Register a differentiable leaf tensor. Rejects NaN/Inf values."""
        arr = _as_f64(value)
        if not np.all(np.isfinite(arr)):
            raise ValueError("leaf tensor contains non-finite values")
        node = self._record(arr, rg=True)
        self.leaves.append(node)
        return node

    def const(self, value) -> Node:
        """Register a non-differentiable tensor (masks, positions, inputs)."""
        return self._record(_as_f64(value), rg=False)

    # -------------------------------------------------------------- primitives

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")
        out = av @ bv

        def ga(g):
            return _unbroadcast(g @ bv.swapaxes(-1, -2), av.shape)

        def gb(g):
            return _unbroadcast(av.swapaxes(-1, -2) @ g, bv.shape)

        return self._record(out, (a, b), (ga, gb))

    def add(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        try:
            out = av + bv
        except ValueError:
            raise ShapeError(f"add: incompatible shapes {av.shape} + {bv.shape}")
        return self._record(
            out,
            (a, b),
            (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(g, bv.shape)),
        )

    def mul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        try:
            out = av * bv
        except ValueError:
            raise ShapeError(f"mul: incompatible shapes {av.shape} * {bv.shape}")
        return self._record(
            out,
            (a, b),
            (
                lambda g: _unbroadcast(g * bv, av.shape),
                lambda g: _unbroadcast(g * av, bv.shape),
            ),
        )

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._record(a.value * c, (a,), (lambda g: g * c,))

    def concat(self, nodes: Sequence[Node], axis: int = 0) -> Node:
        if not nodes:
            raise ShapeError("concat: empty input list")
        values = [n.value for n in nodes]
        out = np.concatenate(values, axis=axis)
        offsets = np.cumsum([0] + [v.shape[axis] for v in values])

        def make_gfn(i):
            lo, hi = offsets[i], offsets[i + 1]

            def gfn(g):
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                return g[tuple(index)]

            return gfn

        return self._record(out, tuple(nodes), tuple(make_gfn(i) for i in range(len(nodes))))

    def slice(self, a: Node, key) -> Node:
        out = a.value[key]
        shape = a.value.shape

        def gfn(g):
            full = np.zeros(shape)
            full[key] = g
            return full

        return self._record(np.ascontiguousarray(out), (a,), (gfn,))

    def reshape(self, a: Node, shape) -> Node:
        old = a.value.shape
        out = a.value.reshape(shape)
        return self._record(out, (a,), (lambda g: g.reshape(old),))

    def transpose(self, a: Node, axes) -> Node:
        inv = np.argsort(axes)
        out = np.ascontiguousarray(a.value.transpose(axes))
        return self._record(out, (a,), (lambda g: g.transpose(inv),))

    def mean_over_axis(self, a: Node, axis: int) -> Node:
        n = a.value.shape[axis]
        out = a.value.mean(axis=axis)

        def gfn(g):
            return np.repeat(np.expand_dims(g / n, axis), n, axis=axis)

        return self._record(out, (a,), (gfn,))

    def sum_over_axis(self, a: Node, axis: int) -> Node:
        n = a.value.shape[axis]
        out = a.value.sum(axis=axis)

        def gfn(g):
            return np.repeat(np.expand_dims(g, axis), n, axis=axis)

        return self._record(out, (a,), (gfn,))

    def softmax(self, a: Node) -> Node:
        shape = a.value.shape
        y = kernels.softmax_fwd(_rows(a.value)).reshape(shape)

        def gfn(g):
            y2 = y.reshape(-1, shape[-1])
            return kernels.softmax_bwd(y2, _rows(g)).reshape(shape)

        return self._record(y, (a,), (gfn,))

    def log_softmax(self, a: Node) -> Node:
        shape = a.value.shape
        y = kernels.log_softmax_fwd(_rows(a.value)).reshape(shape)

        def gfn(g):
            y2 = y.reshape(-1, shape[-1])
            return kernels.log_softmax_bwd(y2, _rows(g)).reshape(shape)

        return self._record(y, (a,), (gfn,))

    def cross_entropy(self, logits: Node, labels) -> Node:
        """Mean NLL of integer labels under softmax(logits); scalar output."""
        lv = logits.value
        labels = np.asarray(labels, dtype=np.int64)
        if lv.ndim != 2 or labels.shape != (lv.shape[0],):
            raise ShapeError(
                f"cross_entropy: logits {lv.shape} incompatible with labels {labels.shape}"
            )
        loss, probs = kernels.cross_entropy_fwd(np.ascontiguousarray(lv), labels)

        def gfn(g):
            return kernels.cross_entropy_bwd(probs, labels, float(g))

        return self._record(np.float64(loss), (logits,), (gfn,))

    def layer_norm(self, x: Node, gain: Node, bias: Node, eps: float = 1e-12) -> Node:
        xv = x.value
        dim = xv.shape[-1]
        if gain.value.shape != (dim,) or bias.value.shape != (dim,):
            raise ShapeError(
                f"layer_norm: gain/bias {gain.value.shape}/{bias.value.shape} "
                f"do not match trailing dim of {xv.shape}"
            )
        y, xhat, inv_std = kernels.layer_norm_fwd(_rows(xv), gain.value, bias.value, eps)

        def gx(g):
            out, _, _ = kernels.layer_norm_bwd(_rows(g), xhat, inv_std, gain.value)
            return out.reshape(xv.shape)

        def ggain(g):
            _, out, _ = kernels.layer_norm_bwd(_rows(g), xhat, inv_std, gain.value)
            return out

        def gbias(g):
            return _rows(g).sum(axis=0)

        return self._record(y.reshape(xv.shape), (x, gain, bias), (gx, ggain, gbias))

    def tanh(self, a: Node) -> Node:
        y = np.tanh(a.value)
        return self._record(y, (a,), (lambda g: g * (1.0 - y * y),))

    def gelu(self, a: Node) -> Node:
        xv = a.value
        y = kernels.gelu_fwd(np.ascontiguousarray(xv.ravel())).reshape(xv.shape)

        def gfn(g):
            return kernels.gelu_bwd(
                np.ascontiguousarray(xv.ravel()), np.ascontiguousarray(g.ravel())
            ).reshape(xv.shape)

        return self._record(y, (a,), (gfn,))

    def embedding_lookup(self, table: Node, ids) -> Node:
        ids = np.asarray(ids, dtype=np.int64)
        tv = table.value
        if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
            raise ShapeError(
                f"embedding_lookup: id out of range for table of {tv.shape[0]} rows"
            )
        out = tv[ids]

        def gfn(g):
            return kernels.embedding_grad(
                ids.ravel(), np.ascontiguousarray(g.reshape(-1, tv.shape[1])), tv.shape[0]
            )

        return self._record(out, (table,), (gfn,))

    def masked_fill(self, a: Node, mask, fill_value: float) -> Node:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.value.shape)
        out = np.where(mask, float(fill_value), a.value)
        return self._record(out, (a,), (lambda g: np.where(mask, 0.0, g),))

    # ------------------------------------------------------------- composites

    def dropout(self, a: Node, p: float, rng: np.random.Generator) -> Node:
        """Inverted dropout via mul with a sampled constant mask."""
        if p <= 0.0:
            return a
        keep = (rng.random(a.value.shape) >= p) / (1.0 - p)
        return self.mul(a, self.const(keep))

    def affine(self, x: Node, w: Node, b: Node) -> Node:
        return self.add(self.matmul(x, w), b)


def backward_from(tape: Tape, seeds: Iterable[tuple[Node, np.ndarray]]) -> dict[Node, np.ndarray]:
    """Reverse sweep from explicit output cotangents.

    Returns gradients for every leaf on the tape; leaves not reached by the
    sweep get zeros. Each recorded node is visited once, in reverse order.
    """
    grads: dict[int, np.ndarray] = {}
    nodes = tape._nodes
    for node, seed in seeds:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != np.shape(node.value):
            raise ShapeError(
                f"backward: seed shape {seed.shape} != node shape {np.shape(node.value)}"
            )
        if node.idx in grads:
            grads[node.idx] = grads[node.idx] + seed
        else:
            grads[node.idx] = seed
    for node in reversed(nodes):
        g = grads.get(node.idx)
        if g is None or not node.rg:
            continue
        for parent, gfn in zip(node.parents, node.grad_fns):
            if not parent.rg:
                continue
            pg = gfn(g)
            if parent.idx in grads:
                grads[parent.idx] += pg
            else:
                grads[parent.idx] = pg
    out: dict[Node, np.ndarray] = {}
    for leaf in tape.leaves:
        g = grads.get(leaf.idx)
        out[leaf] = g if g is not None else np.zeros_like(leaf.value)
    return out


def backward(tape: Tape, loss: Node) -> dict[Node, np.ndarray]:
    """Gradients of a scalar loss with respect to every leaf on the tape."""
    if np.shape(loss.value) != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {np.shape(loss.value)}")
    return backward_from(tape, [(loss, np.float64(1.0))])
