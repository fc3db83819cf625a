"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 ndarray plus the closure that maps its
output gradient back onto its parents. Graphs are built dynamically by the
op functions below and differentiated by :func:`backward` in reverse
topological order. Leaves (parameters) have no vjp; their ``grad`` fields
accumulate across calls until :func:`zero_grads`.

Elementwise-heavy ops (gelu, layernorm, row softmax) delegate to the
selected kernel backend; everything else is plain numpy. Every op here has
its vjp pinned by a finite-difference test.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import ShapeMismatch

FLOAT = np.float64


class Tensor:
    __slots__ = ("data", "grad", "parents", "vjp")

    def __init__(self, data, parents=(), vjp=None):
        if not isinstance(data, np.ndarray) or data.dtype != FLOAT:
            data = np.asarray(data, dtype=FLOAT)
        self.data = data
        self.grad = None
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, leaf={self.vjp is None})"

    # light operator sugar for readable model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data) -> Tensor:
    """Leaf tensor that will receive gradients."""
    return Tensor(np.array(data, dtype=FLOAT))


def constant(data) -> Tensor:
    """Leaf tensor for fixed values; gradients reaching it are never read."""
    return Tensor(np.asarray(data, dtype=FLOAT))


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if root.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar root, got shape {root.data.shape}")
    order = _toposort(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
        node.grad = None  # free intermediate gradients eagerly


def zero_grads(params) -> None:
    tensors = params.values() if isinstance(params, dict) else params
    for t in tensors:
        t.grad = None


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo numpy broadcasting in the backward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def vjp(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(g, b.data.shape)

    return Tensor(out_data, parents=(a, b), vjp=vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def vjp(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(-g, b.data.shape)

    return Tensor(out_data, parents=(a, b), vjp=vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def vjp(g):
        return _sum_to_shape(g * b.data, a.data.shape), _sum_to_shape(g * a.data, b.data.shape)

    return Tensor(out_data, parents=(a, b), vjp=vjp)


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a non-differentiated numpy array or scalar."""
    c = np.asarray(c, dtype=FLOAT)

    def vjp(g):
        return (_sum_to_shape(g * c, a.data.shape),)

    return Tensor(a.data * c, parents=(a,), vjp=vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def vjp(g):
        return (g * s,)

    return Tensor(a.data * s, parents=(a,), vjp=vjp)


def add_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=FLOAT)

    def vjp(g):
        return (_sum_to_shape(g, a.data.shape),)

    return Tensor(a.data + c, parents=(a,), vjp=vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim:
        raise ShapeMismatch(f"matmul rank mismatch: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return Tensor(out_data, parents=(a, b), vjp=vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inverse),)

    return Tensor(a.data.transpose(axes), parents=(a,), vjp=vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return Tensor(a.data.reshape(shape), parents=(a,), vjp=vjp)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out_data, parents=tuple(tensors), vjp=vjp)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0; duplicate indices accumulate in the backward."""
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return Tensor(a.data[idx], parents=(a,), vjp=vjp)


def row(a: Tensor, i: int) -> Tensor:
    return gather_rows(a, np.array([i], dtype=np.intp))


def sum_all(a: Tensor) -> Tensor:
    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor(np.asarray(a.data.sum()), parents=(a,), vjp=vjp)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return Tensor(np.asarray(a.data.mean()), parents=(a,), vjp=vjp)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,), vjp=vjp)


def scatter_add_rows(a: Tensor, seg_ids, n_segments: int) -> Tensor:
    """out[s] = sum of rows of ``a`` whose segment id is s; empty segments are zero."""
    seg_ids = np.asarray(seg_ids, dtype=np.intp)
    out_data = np.zeros((n_segments,) + a.data.shape[1:])
    np.add.at(out_data, seg_ids, a.data)

    def vjp(g):
        return (g[seg_ids],)

    return Tensor(out_data, parents=(a,), vjp=vjp)


def segment_softmax(scores: Tensor, seg_ids, n_segments: int) -> Tensor:
    """Softmax of a flat score vector within each segment.

    Stable via per-segment max shifting; segments are assumed nonempty for
    every id that actually appears in ``seg_ids``.
    """
    seg_ids = np.asarray(seg_ids, dtype=np.intp)
    x = scores.data.ravel()
    seg_max = np.full(n_segments, -np.inf)
    np.maximum.at(seg_max, seg_ids, x)
    e = np.exp(x - seg_max[seg_ids])
    denom = np.zeros(n_segments)
    np.add.at(denom, seg_ids, e)
    probs = e / denom[seg_ids]

    def vjp(g):
        g = g.ravel()
        inner = np.zeros(n_segments)
        np.add.at(inner, seg_ids, g * probs)
        return ((probs * (g - inner[seg_ids])).reshape(scores.data.shape),)

    return Tensor(probs.reshape(scores.data.shape), parents=(scores,), vjp=vjp)


# ---------------------------------------------------------------------------
# nonlinearities and normalization (kernel-backed where hot)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope)

    def vjp(g):
        return (g * factor,)

    return Tensor(np.where(a.data > 0, a.data, a.data * slope), parents=(a,), vjp=vjp)


def gelu(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatch(f"gelu expects 2-D activations, got {a.data.shape}")
    x = np.ascontiguousarray(a.data)

    def vjp(g):
        return (kernels.gelu_bwd(x, np.ascontiguousarray(g)),)

    return Tensor(kernels.gelu_fwd(x), parents=(a,), vjp=vjp)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatch(f"layernorm expects 2-D activations, got {x.data.shape}")
    xc = np.ascontiguousarray(x.data)
    y, mean, rstd = kernels.layernorm_fwd(xc, gain.data, bias.data, eps)

    def vjp(g):
        gx, ggain, gbias = kernels.layernorm_bwd(xc, gain.data, mean, rstd, np.ascontiguousarray(g))
        return gx, ggain, gbias

    return Tensor(y, parents=(x, gain, bias), vjp=vjp)


def masked_softmax(scores: Tensor, additive_mask=None) -> Tensor:
    """Row softmax along the last axis, after adding an optional bias mask.

    The mask is a plain array (never differentiated) whose forbidden entries
    hold the most-negative finite float; after row-max shifting those entries
    underflow to exactly zero probability.
    """
    data = scores.data if additive_mask is None else scores.data + additive_mask
    shape = data.shape
    rows = np.ascontiguousarray(data.reshape(-1, shape[-1]))
    probs = kernels.softmax_rows_fwd(rows)

    def vjp(g):
        g2 = np.ascontiguousarray(g.reshape(-1, shape[-1]))
        return (kernels.softmax_rows_bwd(probs, g2).reshape(shape),)

    return Tensor(probs.reshape(shape), parents=(scores,), vjp=vjp)


def bce_with_logits_mean(logits: Tensor, targets) -> Tensor:
    """Mean elementwise binary cross-entropy against fixed {0,1} targets.

    Stable form: max(x,0) - x*y + log1p(exp(-|x|)). Zero-width heads
    contribute an exact 0 with zero gradient.
    """
    y = np.asarray(targets, dtype=FLOAT)
    x = logits.data
    if x.shape != y.shape:
        raise ShapeMismatch(f"logits {x.shape} vs targets {y.shape}")
    if x.size == 0:
        def vjp_empty(g):
            return (np.zeros_like(x),)

        return Tensor(np.asarray(0.0), parents=(logits,), vjp=vjp_empty)
    per_elem = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def vjp(g):
        return (g * (expit(x) - y) / n,)

    return Tensor(np.asarray(per_elem.mean()), parents=(logits,), vjp=vjp)
