"""Reverse-mode autodiff over dense numpy arrays.

Tensors wrap row-major arrays (float32 for training, float64 for gradient
verification) and record a tape of backward closures.  Ops are deliberately
coarse (fused layer_norm, softmax, cross_entropy) so Python overhead stays
off the training hot path.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

from ..errors import InputError, UsageError

_GRAD_ENABLED = True
_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327
MASK_NEG = -1e9  # additive mask value standing in for -inf


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()
        self.name = name

    # -- plumbing -------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # Copy: g may alias another node's grad buffer via no-op unbroadcast.
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse accumulation from a scalar loss through the recorded tape."""
        if self.data.size != 1:
            raise UsageError("backward requires a scalar loss")
        if self._backward is None and not self._parents:
            raise UsageError("backward called on a tensor with no recorded computation")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node is not self and not node.requires_grad:
                # free intermediate grads once consumed
                node.grad = None
            node._backward = None
            node._parents = ()

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: Sequence[Tensor], backward) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast up from ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # NaN/Inf surface immediately at the op that produced them.
    if not np.isfinite(arr).all():
        raise InputError(f"non-finite values produced by {op}")
    return arr


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        if a.requires_grad or a._parents:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b.accumulate(_unbroadcast(g, b.data.shape))
    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        if a.requires_grad or a._parents:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))
    return _record(out, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data * a.data.dtype.type(s))

    def backward(g):
        a.accumulate(g * a.data.dtype.type(s))
    return _record(out, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        if a.requires_grad or a._parents:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad or b._parents:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # One flat GEMM instead of a batched product plus reduction.
                gb = a.data.reshape(-1, a.data.shape[-1]).T \
                    @ g.reshape(-1, g.shape[-1])
                b.accumulate(gb)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b.accumulate(_unbroadcast(gb, b.data.shape))
    return _record(out, (a, b), backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate(g.transpose(inv))
    return _record(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        a.accumulate(g.reshape(a.data.shape))
    return _record(out, (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad or t._parents:
                t.accumulate(piece)
    return _record(out, tuple(ts), backward)


def slice_(a, key) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data[key])

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a.accumulate(full)
    return _record(out, (a,), backward)


def embedding_gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; the backward pass scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise InputError(
            f"token id outside embedding table of {table.data.shape[0]} rows")
    out = Tensor(table.data[ids])

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
    return _record(out, (table,), backward)


def softmax_masked(logits: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax after adding ``mask`` (0 / -1e9 entries) to the logits."""
    x = logits.data
    if mask is not None:
        if np.all(np.broadcast_to(mask, x.shape) <= MASK_NEG / 2, axis=axis).any():
            raise InputError("softmax row has every position masked")
        x = x + mask
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        logits.accumulate(p * (g - dot))
    return _record(out, (logits,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the learned affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g):
        red = tuple(range(g.ndim - 1))
        if gain.requires_grad or gain._parents:
            gain.accumulate((g * xhat).sum(axis=red))
        if bias.requires_grad or bias._parents:
            bias.accumulate(g.sum(axis=red))
        gx = g * gain.data
        term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        x.accumulate(term * inv)
    return _record(out, (x, gain, bias), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        x.accumulate(g * (cdf + x.data * pdf))
    return _record(out, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; a p of zero is the identity (and records nothing)."""
    if not 0.0 <= p < 1.0:
        raise InputError(f"dropout probability {p} outside [0, 1)")
    if p == 0.0 or not _GRAD_ENABLED:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out = Tensor(x.data * keep)

    def backward(g):
        x.accumulate(g * keep)
    return _record(out, (x,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, axis: int = -1) -> Tensor:
    """Per-row -log softmax(logits)[target]; reduce with ``mean`` as needed."""
    if axis != -1:
        raise UsageError("cross_entropy normalizes the last axis only")
    t = np.asarray(targets)
    if t.shape != logits.data.shape[:-1]:
        raise InputError(f"targets {t.shape} do not match logits {logits.data.shape[:-1]}")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    flat = logp.reshape(-1, x.shape[-1])
    picked = flat[np.arange(flat.shape[0]), t.reshape(-1)].reshape(t.shape)
    out = Tensor(-picked)

    def backward(g):
        p = np.exp(logp)
        p.reshape(-1, x.shape[-1])[np.arange(flat.shape[0]), t.reshape(-1)] -= 1.0
        logits.accumulate(p * g[..., None])
    return _record(out, (logits,), backward)


def sum_(a: Tensor, axis=None) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=False))

    def backward(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            a.accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())
    return _record(out, (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def check_finite(t: Tensor, where: str = "op") -> Tensor:
    _check_finite(t.data, where)
    return t
