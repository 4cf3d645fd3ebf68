"""Dense float64 tensors with tape-free reverse-mode differentiation.

Each op result keeps references to its parents and a closure mapping the
output gradient to parent gradients. ``backward`` orders the reachable
records topologically, runs the closures once each, accumulates into leaf
``.grad`` buffers and then drops the records so the next step starts from a
clean slate.

Broadcasting is deliberately absent: elementwise ops require equal shapes,
and row-vector bias/scale have their own ops (``add_row``, ``mul_row``).
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, UsageError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph records inside the block (teacher passes, evaluation)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self):
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def custom(data, parents, backward_fn, op="custom") -> Tensor:
    """Wrap a forward result computed outside this module.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per
    parent, in order.
    """
    parents = tuple(parents)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    out.op = op
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return custom(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return custom(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return custom(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return custom(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return custom(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x). The model's only nonlinearity."""
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = x.data * sig

    def bw(g):
        return (g * (sig + out * (1.0 - sig)),)

    return custom(out, (x,), bw, "silu")


# ---------------------------------------------------------------------------
# Linear algebra and row-vector ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return custom(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def _check_row(x: Tensor, v: Tensor, op: str):
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise DimensionError(f"{op}: row vector {v.shape} does not match {x.shape}")


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-C vector to every row of a (T, C) tensor."""
    _check_row(x, b, "add_row")
    return custom(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_row")


def mul_row(x: Tensor, w: Tensor) -> Tensor:
    """Scale every row of a (T, C) tensor by a length-C vector."""
    _check_row(x, w, "mul_row")
    xd, wd = x.data, w.data
    return custom(xd * wd, (x, w), lambda g: (g * wd, (g * xd).sum(axis=0)), "mul_row")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add_row(matmul(x, w), b)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv_out_len(T: int, K: int, stride: int) -> int:
    pad = K // 2
    return (T + 2 * pad - K) // stride + 1


def conv1d_depthwise(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Per-channel 1-D convolution over time with zero padding ``K // 2``."""
    if x.data.ndim != 2 or kernel.data.ndim != 2 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv1d_depthwise: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1:
        raise DimensionError(f"conv1d_depthwise: stride must be positive, got {stride}")
    T, C = x.shape
    K = kernel.shape[0]
    pad = K // 2
    if K > T + 2 * pad:
        raise DimensionError(f"conv1d_depthwise: kernel length {K} exceeds padded input {T + 2 * pad}")
    T_out = conv_out_len(T, K, stride)
    xp = np.zeros((T + 2 * pad, C))
    xp[pad:pad + T] = x.data
    w = kernel.data
    span = stride * (T_out - 1) + 1
    out = np.zeros((T_out, C))
    for k in range(K):
        out += xp[k:k + span:stride] * w[k]

    def bw(g):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(w)
        for k in range(K):
            dxp[k:k + span:stride] += g * w[k]
            dw[k] = (g * xp[k:k + span:stride]).sum(axis=0)
        return dxp[pad:pad + T], dw

    return custom(out, (x, kernel), bw, "conv1d_depthwise")


# ---------------------------------------------------------------------------
# Slicing and reductions
# ---------------------------------------------------------------------------

def slice_time(x: Tensor, start: int, stop: int) -> Tensor:
    T = x.shape[0]
    if not 0 <= start <= stop <= T:
        raise DimensionError(f"slice_time: [{start}, {stop}) outside [0, {T}]")

    def bw(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return (dx,)

    return custom(x.data[start:stop].copy(), (x,), bw, "slice_time")


def concat_time(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise UsageError("concat_time needs at least one tensor")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise DimensionError(f"concat_time: trailing shapes {p.shape[1:]} and {tail} differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return custom(np.concatenate([p.data for p in parts], axis=0), parts, bw, "concat_time")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return custom(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.data.size
    return custom(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    if x.data.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"log_softmax: empty last axis in shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax: non-finite input")
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return custom(out, (x,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

@dataclass
class Graph:
    """Operation records reachable from a root, inputs before consumers."""

    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)


def build_graph(root: Tensor) -> Graph:
    order = []
    seen = set()
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return Graph(order)


def backward(root: Tensor, graph: Graph | None = None):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("backward: root does not depend on any tensor requiring grad")
    graph = graph or build_graph(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.records):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in graph.records:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
