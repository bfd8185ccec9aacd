"""Dense tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every operation that touches a tensor with
``requires_grad=True`` (while gradients are enabled) links the result to its
inputs through a backward closure. ``backward(loss)`` traces the graph
reachable from a scalar loss into a :class:`Tape`, replays it in reverse
topological order, and accumulates ``.grad`` on every reachable tensor.

Data lives in numpy arrays. float32 is the training dtype; building tensors
as float64 turns the whole graph into a 64-bit one, which is what the
finite-difference checks use (32-bit differences are too noisy).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / frozen teachers)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense n-d array that can participate in the gradient tape.

    Invariants: ``data`` is a numpy array; ``grad`` is either None or an array
    of identical shape; non-leaf tensors keep ``_parents``/``_backward`` until
    a backward pass consumes (and severs) them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._backward_done = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar ------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Reverse-topological record of the ops reachable from a root tensor.

    ``nodes`` holds each graph node exactly once, parents before children, so
    replaying the list in reverse applies every backward closure once.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        visited = set()
        # Iterative DFS; CRF recursions can chain hundreds of nodes.
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

    def replay_reverse(self):
        """Run every backward closure once, seeding d(root)/d(root) = 1."""
        self.root.grad = np.ones_like(self.root.data)
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not (parent.requires_grad or parent._parents):
                    continue
                if parent.grad is None:
                    parent.grad = g if g.dtype == parent.data.dtype else g.astype(parent.data.dtype)
                else:
                    parent.grad += g

    def clear(self):
        """Sever the recorded graph, releasing saved intermediates."""
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes.clear()


def backward(loss: Tensor):
    """Populate ``.grad`` for everything the scalar ``loss`` depends on.

    The traced tape is cleared afterwards, so calling backward twice on the
    same loss raises instead of silently double-counting.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._backward_done:
        raise RuntimeError("backward already called on this loss; rebuild the graph first")
    tape = Tape(loss)
    tape.replay_reverse()
    loss._backward_done = True
    tape.clear()


# -- helpers -----------------------------------------------------------


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it on the graph only when needed."""
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = True
        out.grad = None
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._backward_done = False
        return out
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), back)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(data, (a, b), back)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(data, (a, b), back)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _make(data, (a, b), back)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        return (-g,)

    return _make(-a.data, (a,), back)


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    data = a.data ** exponent

    def back(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(data, (a,), back)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def back(g):
        return (g * data,)

    return _make(data, (a,), back)


def log(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def back(g):
        return (g / a.data,)

    return _make(data, (a,), back)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def back(g):
        return (g * (1.0 - data * data),)

    return _make(data, (a,), back)


def gelu(a) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * (1.0 / math.sqrt(2.0))))
    data = x * cdf

    def back(g):
        pdf = np.exp(-0.5 * x * x) * (1.0 / math.sqrt(2.0 * math.pi))
        return (g * (cdf + x * pdf),)

    return _make(data.astype(x.dtype, copy=False), (a,), back)


# -- structural ops ------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics (stacked leading dims)."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _make(data, (a, b), back)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    orig = a.data.shape
    data = a.data.reshape(shape)

    def back(g):
        return (g.reshape(orig),)

    return _make(data, (a,), back)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def back(g):
        return (g.transpose(inverse),)

    return _make(data, (a,), back)


def getitem(a, idx) -> Tensor:
    """Basic and integer-array indexing with scatter-add gradients."""
    a = _as_tensor(a)
    data = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(data, (a,), back)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of ``table`` ([V, H]) at integer ``ids`` (any shape)."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"id out of vocabulary range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    data = table.data[ids]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(data, (table,), back)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(np.asarray(data), (a,), back)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis] if isinstance(axis, int) else int(np.prod([a.data.shape[ax] for ax in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- normalizations -------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Row-normalized exponentials, stabilized by max subtraction."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (a,), back)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def back(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _make(data, (a,), back)


def logsumexp(a, axis: int, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    data = out if keepdims else np.squeeze(out, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(data, (a,), back)


def layer_norm(x, gamma, beta, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then scale and shift."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, like=x)
    beta = _as_tensor(beta, like=x)
    if gamma.data.shape != x.data.shape[-1:] or beta.data.shape != x.data.shape[-1:]:
        raise ValueError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match last dimension of {x.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def back(g):
        n = x.data.shape[-1]
        dgamma = (g * xhat).reshape(-1, n).sum(axis=0)
        dbeta = g.reshape(-1, n).sum(axis=0)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _make(data.astype(x.data.dtype, copy=False), (x, gamma, beta), back)


def dropout(x, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Zero activations with probability p, scaling survivors by 1/(1-p)."""
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    scale = 1.0 / (1.0 - p)
    mask = keep * np.asarray(scale, dtype=x.data.dtype)
    data = x.data * mask

    def back(g):
        return (g * mask,)

    return _make(data, (x,), back)
