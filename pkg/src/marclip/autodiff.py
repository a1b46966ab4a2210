"""Minimal reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray and (when gradients are requested) a record of
the op that produced it. Calling backward() on a scalar walks the graph
in reverse topological order and accumulates gradients into every
reachable Tensor with requires_grad=True.

The op set is deliberately small: add/mul/matmul, shape ops, softmax,
layer-norm, GELU/SiLU, reductions, L2-normalize, plus exp/log/clamp
needed by the losses. Reduction loop order is fixed (plain numpy, single
thread) so runs are reproducible bit for bit.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "as_tensor",
    "concat",
    "gather_rows",
    "scatter_rows",
    "layer_norm",
    "l2_normalize",
    "softmax",
    "backward",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        """Wrap a scalar operand in the operand tensor's float dtype so
        python/numpy float64 scalars never promote a float32 graph."""
        if isinstance(other, Tensor):
            return other
        arr = np.asarray(other)
        if arr.ndim == 0 and arr.dtype.kind == "f" and self.data.dtype.kind == "f":
            arr = arr.astype(self.data.dtype)
        return Tensor(arr)

    def __add__(self, other):
        other = self._coerce(other)
        out_data = self.data + other.data
        return _record(out_data, (self, other), lambda g: (
            _unbroadcast(g, self.data.shape),
            _unbroadcast(g, other.data.shape),
        ))

    __radd__ = __add__

    def __neg__(self):
        return _record(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        out_data = self.data * other.data
        return _record(out_data, (self, other), lambda g: (
            _unbroadcast(g * other.data, self.data.shape),
            _unbroadcast(g * self.data, other.data.shape),
        ))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * self._coerce(other) ** -1.0

    def __rtruediv__(self, other):
        return self._coerce(other) * self ** -1.0

    def __pow__(self, p):
        assert isinstance(p, (int, float))
        out_data = self.data ** p
        return _record(out_data, (self,), lambda g: (g * p * self.data ** (p - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        out_data = a @ b
        return _record(out_data, (self, other), lambda g: (
            _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape),
            _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape),
        ))

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def vjp(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            return (full,)

        return _record(out_data, (self,), vjp)

    # -- shape ops -----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        return _record(out_data, (self,), lambda g: (g.reshape(self.data.shape),))

    def swapaxes(self, a, b):
        out_data = np.swapaxes(self.data, a, b)
        return _record(out_data, (self,), lambda g: (np.swapaxes(g, a, b),))

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        out_data = np.transpose(self.data, axes)
        return _record(out_data, (self,), lambda g: (np.transpose(g, inv),))

    # -- reductions ----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, self.data.shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.data.shape).copy(),)

        return _record(out_data, (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- pointwise nonlinearities -------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        return _record(out_data, (self,), lambda g: (g * out_data,))

    def log(self):
        out_data = np.log(self.data)
        return _record(out_data, (self,), lambda g: (g / self.data,))

    def gelu(self):
        x = self.data
        cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        out_data = x * cdf
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * np.pi)
        return _record(out_data, (self,), lambda g: (g * (cdf + x * pdf),))

    def silu(self):
        x = self.data
        sig = 1.0 / (1.0 + np.exp(-x))
        out_data = x * sig
        return _record(out_data, (self,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))

    def clamp_max(self, hi):
        out_data = np.minimum(self.data, hi)
        return _record(out_data, (self,), lambda g: (g * (self.data <= hi),))

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, vjp) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _vjp=vjp)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def softmax(x: Tensor, axis=-1) -> Tensor:
    d = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(d)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(y, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5) -> Tensor:
    """Normalize over the last axis, then scale/shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def vjp(g):
        dgamma = _unbroadcast(g * xhat, gamma.data.shape)
        dbeta = _unbroadcast(g, beta.data.shape)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _record(out_data, (x, gamma, beta), vjp)


def l2_normalize(x: Tensor, axis=-1, eps=1e-12) -> Tensor:
    norm = (x * x).sum(axis=axis, keepdims=True)
    return x * (norm + eps) ** -0.5


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out_data, tuple(tensors), vjp)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """out[b, j] = x[b, index[b, j]] for a (B, L, D) tensor and (B, J) index."""
    b_idx = np.arange(x.data.shape[0])[:, None]
    out_data = x.data[b_idx, index]

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (b_idx, index), g)
        return (full,)

    return _record(out_data, (x,), vjp)


def scatter_rows(rows: Tensor, index: np.ndarray, length: int) -> Tensor:
    """Inverse of gather_rows: out[b, index[b, j]] += rows[b, j], with
    zeros elsewhere; out has shape (B, length, D)."""
    b, j, d = rows.data.shape
    b_idx = np.arange(b)[:, None]
    out_data = np.zeros((b, length, d), dtype=rows.data.dtype)
    np.add.at(out_data, (b_idx, index), rows.data)

    def vjp(g):
        return (g[b_idx, index],)

    return _record(out_data, (rows,), vjp)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into t.grad for every reachable tensor.

    The loss must be scalar; gradients add onto any existing .grad.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    seen = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        if node.requires_grad and node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
