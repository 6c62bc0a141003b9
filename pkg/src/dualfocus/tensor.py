"""Dense float64 tensors with reverse-mode differentiation.

Every trainable quantity in the package is a :class:`Tensor`. Operations
build a computation graph on the fly; ``backward`` walks it once in
reverse topological order and accumulates gradients into the leaves.
All arrays are C-contiguous float64; no other dtype is ever created.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "cosine_similarity",
    "softmax",
    "concat",
    "gather_rows",
    "gather_pairs",
    "take_first",
    "compute_gradients",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 ndarray plus an optional backward edge in the graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    # -- construction -----------------------------------------------------

    @classmethod
    def _from_op(cls, data, parents: Sequence["Tensor"],
                 backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autograd ---------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar; fills ``grad`` on requiring tensors."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, grad: np.ndarray) -> None:
        # copy on first write: the incoming array may be shared with a sibling
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        data = self.data + other.data

        def backward(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))

        return Tensor._from_op(data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g, a=self):
            a._accum(-g)

        return Tensor._from_op(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        data = self.data * other.data

        def backward(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._from_op(data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        data = self.data / other.data

        def backward(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._from_op(data, (self, other), backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __matmul__(self, other):
        other = as_tensor(other)
        data = np.matmul(self.data, other.data)

        def backward(g, a=self, b=other):
            if a.requires_grad:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)),
                                  a.data.shape)
                a._accum(ga)
            if b.requires_grad:
                # stacked inputs against a 2-D weight reduce to one flat GEMM
                if b.data.ndim == 2 and a.data.ndim >= 2:
                    gb = a.data.reshape(-1, a.data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g),
                                      b.data.shape)
                b._accum(gb)

        return Tensor._from_op(data, (self, other), backward)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def backward(g, a=self):
            a._accum(g.reshape(a.data.shape))

        return Tensor._from_op(data, (self,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        data = np.transpose(self.data, axes)

        def backward(g, a=self, inv=tuple(inv)):
            a._accum(np.transpose(g, inv))

        return Tensor._from_op(data, (self,), backward)

    def __getitem__(self, key):
        data = self.data[key]

        def backward(g, a=self, key=key):
            full = np.zeros_like(a.data)
            full[key] = g
            a._accum(full)

        return Tensor._from_op(data, (self,), backward)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g, a=self, axis=axis, keepdims=keepdims):
            if axis is None:
                a._accum(np.broadcast_to(g, a.data.shape).copy())
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                a._accum(np.broadcast_to(g, a.data.shape).copy())

        return Tensor._from_op(data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int, keepdims: bool = False):
        """Max along an axis; gradient flows to the first maximal entry."""
        idx = np.argmax(self.data, axis=axis)
        data = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis)
        if not keepdims:
            data = np.squeeze(data, axis=axis)

        def backward(g, a=self, axis=axis, idx=idx, keepdims=keepdims):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros_like(a.data)
            np.put_along_axis(full, np.expand_dims(idx, axis), g, axis)
            a._accum(full)

        return Tensor._from_op(data, (self,), backward)

    # -- elementwise --------------------------------------------------------

    def exp(self):
        data = np.exp(self.data)

        def backward(g, a=self, out=data):
            a._accum(g * out)

        return Tensor._from_op(data, (self,), backward)

    def log(self):
        data = np.log(self.data)

        def backward(g, a=self):
            a._accum(g / a.data)

        return Tensor._from_op(data, (self,), backward)

    def sqrt(self):
        data = np.sqrt(self.data)

        def backward(g, a=self, out=data):
            a._accum(g * (0.5 / out))

        return Tensor._from_op(data, (self,), backward)

    def gelu(self):
        """Exact (erf-based) GELU; smooth, so finite differences stay honest."""
        x = self.data
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        data = x * cdf

        def backward(g, a=self, cdf=cdf):
            x = a.data
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
            a._accum(g * (cdf + x * pdf))

        return Tensor._from_op(data, (self,), backward)

    def clip(self, lo: float, hi: float):
        """Clamp values; gradient passes only through unclamped entries."""
        data = np.clip(self.data, lo, hi)
        mask = (self.data > lo) & (self.data < hi)

        def backward(g, a=self, mask=mask):
            a._accum(g * mask)

        return Tensor._from_op(data, (self,), backward)

    def softmax(self, axis: int = -1):
        """Numerically stable softmax along `axis` (max-subtraction)."""
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=axis, keepdims=True)

        def backward(g, a=self, s=s, axis=axis):
            dot = (g * s).sum(axis=axis, keepdims=True)
            a._accum(s * (g - dot))

        return Tensor._from_op(s, (self,), backward)

    def log_softmax(self, axis: int = -1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        out = z - lse

        def backward(g, a=self, out=out, axis=axis):
            a._accum(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

        return Tensor._from_op(out, (self,), backward)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g, parts=tuple(tensors), offsets=offsets, axis=axis):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return Tensor._from_op(data, tensors, backward)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up embedding rows: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def backward(g, t=table, ids=ids):
        full = np.zeros_like(t.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, t.data.shape[-1]))
        t._accum(full)

    return Tensor._from_op(data, (table,), backward)


def take_first(t: Tensor, idx: np.ndarray) -> Tensor:
    """Gather slices along axis 0; duplicate indices accumulate on backward."""
    idx = np.asarray(idx, dtype=np.int64)
    data = t.data[idx]

    def backward(g, a=t, idx=idx):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return Tensor._from_op(data, (t,), backward)


def gather_pairs(t: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick matrix entries t[rows[k], cols[k]] as a vector."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    data = t.data[rows, cols]

    def backward(g, a=t, rows=rows, cols=cols):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        a._accum(full)

    return Tensor._from_op(data, (t,), backward)


def compute_gradients(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Backward pass from `loss`; returns fresh gradient arrays per parameter.

    Parameters that the loss does not touch get zero gradients of matching
    shape, so callers can always combine results linearly.
    """
    for p in params.values():
        p.grad = None
    loss.backward()
    grads = {}
    for name, p in params.items():
        grads[name] = np.zeros_like(p.data) if p.grad is None else p.grad
        p.grad = None
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    return grads


# -- public numeric primitives (plain float/ndarray interface) --------------


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two equal-length vectors.

    Raises ValueError on zero-norm input rather than returning a silent 0.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape or u.size < 1:
        raise ValueError(f"expected equal-length vectors, got {u.shape} and {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine_similarity undefined for zero-norm input")
    return float(np.dot(u, v) / (nu * nv))


def softmax(x, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax exp(x_i/tau) / sum_k exp(x_k/tau), stabilised."""
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input must be finite")
    z = x / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
