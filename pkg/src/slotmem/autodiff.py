"""Minimal dense-tensor reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays (float32 optionally, for inference) and
record the ops that produced them; `backward` walks the tape and accumulates
gradients into every reachable parameter. Gradient accumulation never
mutates arrays in place (`grad = grad + g`), so views handed to parents stay
valid.

Only the shapes this model needs are supported; operands of matrix ops must
be at least 2-D.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeMismatch",
    "GraphCycle",
    "no_grad",
    "backward",
]


class ShapeMismatch(Exception):
    pass


class GraphCycle(Exception):
    pass


_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable tape recording (forward-only inference)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        self.data = np.asarray(data, dtype=dtype) if not isinstance(data, np.ndarray) else data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple["Tensor", ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named trainable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(np.asarray(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape})"


def _out(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    t = Tensor(data)
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward_fn
    return t


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def constant(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    y = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _out(y, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    y = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _out(y, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    y = np.matmul(a.data, b.data)

    def bw(g):
        _accum(a, _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape))
        _accum(b, _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape))

    return _out(y, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias, for weight shaped (out, in)."""
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {weight.shape}")
    in_dim = x.shape[-1]
    out_dim = weight.shape[0]
    x2 = x.data.reshape(-1, in_dim)
    y2 = x2 @ weight.data.T
    if bias is not None:
        y2 = y2 + bias.data
    y = y2.reshape(*x.shape[:-1], out_dim)

    def bw(g):
        g2 = g.reshape(-1, out_dim)
        _accum(x, (g2 @ weight.data).reshape(x.data.shape))
        _accum(weight, g2.T @ x2)
        if bias is not None:
            _accum(bias, g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _out(y, parents, bw)


def reshape(x: Tensor, shape) -> Tensor:
    y = x.data.reshape(shape)

    def bw(g):
        _accum(x, g.reshape(x.data.shape))

    return _out(y, (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    y = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(x, np.transpose(g, inv))

    return _out(y, (x,), bw)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    y = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            _accum(p, g[tuple(idx)])

    return _out(y, tuple(parts), bw)


def narrow(x: Tensor, start: int, length: int, axis: int = -1) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    y = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accum(x, full)

    return _out(y, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        _accum(x, (1.0 - y * y) * g)

    return _out(y, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g):
        _accum(x, y * (1.0 - y) * g)

    return _out(y, (x,), bw)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)

    def bw(g):
        _accum(x, g * (x.data > 0.0))

    return _out(y, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation gelu, the transformer feed-forward activation."""
    xd = x.data
    sq = xd * xd
    t = np.tanh(_GELU_C * (xd + _GELU_A * sq * xd))
    y = 0.5 * xd * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + (3.0 * _GELU_A) * sq)
        dy = 0.5 * (1.0 + t) + (0.5 * xd) * ((1.0 - t * t) * du)
        _accum(x, dy * g)

    return _out(y, (x,), bw)


def log(x: Tensor) -> Tensor:
    y = np.log(x.data)

    def bw(g):
        _accum(x, g / x.data)

    return _out(y, (x,), bw)


def clip_min(x: Tensor, floor: float) -> Tensor:
    y = np.maximum(x.data, floor)

    def bw(g):
        _accum(x, g * (x.data >= floor))

    return _out(y, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - inner))

    return _out(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gain.data * xhat + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        dxhat = g * gain.data
        _accum(x, inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)))

    return _out(y, (x, gain, bias), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode."""
    if rate <= 0.0:
        return x
    mask = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.data.dtype)
    mask *= 1.0 / (1.0 - rate)
    y = x.data * mask

    def bw(g):
        _accum(x, g * mask)

    return _out(y, (x,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: output shape ids.shape + (d,)."""
    ids = np.asarray(ids)
    y = table.data[ids]

    def bw(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids, g)
        _accum(table, acc)

    return _out(y, (table,), bw)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch row gather: x (B, T, d), idx (B, K) -> (B, K, d)."""
    idx = np.asarray(idx)
    rows = np.arange(x.shape[0])[:, None]
    y = x.data[rows, idx]

    def bw(g):
        acc = np.zeros_like(x.data)
        np.add.at(acc, (rows, idx), g)
        _accum(x, acc)

    return _out(y, (x,), bw)


def gather_index(p: Tensor, ids: np.ndarray) -> Tensor:
    """Pick one entry per row: p (N, V), ids (N,) -> (N,)."""
    ids = np.asarray(ids)
    rows = np.arange(p.shape[0])
    y = p.data[rows, ids]

    def bw(g):
        acc = np.zeros_like(p.data)
        np.add.at(acc, (rows, ids), g)
        _accum(p, acc)

    return _out(y, (p,), bw)


def scatter_sum(weights: Tensor, ids: np.ndarray, size: int) -> Tensor:
    """Sum position weights onto ids: weights (N, T), ids (N, T) -> (N, size).

    Positions sharing an id accumulate, which is what maps a distribution
    over input positions onto the vocabulary.
    """
    ids = np.asarray(ids)
    rows = np.arange(weights.shape[0])[:, None]
    y = np.zeros((weights.shape[0], size), dtype=weights.data.dtype)
    np.add.at(y, (rows, ids), weights.data)

    def bw(g):
        _accum(weights, g[rows, ids])

    return _out(y, (weights,), bw)


def sum_all(x: Tensor) -> Tensor:
    y = np.asarray(x.data.sum())

    def bw(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _out(y, (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    y = np.asarray(x.data.sum() / n)

    def bw(g):
        _accum(x, np.broadcast_to(g / n, x.data.shape))

    return _out(y, (x,), bw)


# ---------------------------------------------------------------------------
# the tape walk
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    done: set[int] = set()
    onpath: set[int] = set()  # nodes whose subgraph is still being expanded
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            onpath.discard(key)
            done.add(key)
            order.append(node)
            continue
        if key in done or key in onpath:
            continue
        onpath.add(key)
        stack.append((node, True))
        for parent in node._parents:
            pk = id(parent)
            if pk in onpath:
                raise GraphCycle("cycle detected in the autodiff tape")
            if pk not in done:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, free_graph: bool = True) -> None:
    """Populate gradients of every parameter reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad (built under no_grad?)")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
        if free_graph and node._parents:
            node._backward = None
            node._parents = ()
            node.grad = None
