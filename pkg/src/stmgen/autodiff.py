"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 or float64) and record the operations
that produced them on an implicit tape (the parent links of each node).
Calling :func:`backward` on a scalar loss replays the tape in reverse
topological order and accumulates gradients into every leaf that was
created with ``requires_grad=True``.

Every operation validates that its output is finite; NaN or Inf raises
:class:`NonFiniteError` immediately instead of propagating.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf


class NonFiniteError(ValueError):
    """An operation produced (or was fed) a NaN or Inf value."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Immutable dense array node on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None,
                 dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad = None
        self._parents = _parents if self.requires_grad or _parents else ()
        self._backward = _backward

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward, op):
        _check_finite(data, op)
        need = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        t = Tensor.__new__(Tensor)
        t.data = data
        t.requires_grad = need
        t.grad = None
        t._parents = parents if need else ()
        t._backward = backward if need else None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        out_data = self.data + other.data

        def bwd(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))

        return Tensor._make(out_data, (self, other), bwd, "add")

    __radd__ = __add__

    def __neg__(self):
        def bwd(g, a=self):
            if a.requires_grad:
                a._accum(-g)
        return Tensor._make(-self.data, (self,), bwd, "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        out_data = self.data * other.data

        def bwd(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(out_data, (self, other), bwd, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        return self * other.pow(-1.0)

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) * self.pow(-1.0)

    def pow(self, p):
        out_data = np.power(self.data, p)

        def bwd(g, a=self, p=p):
            if a.requires_grad:
                a._accum(g * p * np.power(a.data, p - 1))

        return Tensor._make(out_data, (self,), bwd, "pow")

    def sqrt(self):
        return self.pow(0.5)

    def exp(self):
        out_data = np.exp(self.data)

        def bwd(g, a=self, y=out_data):
            if a.requires_grad:
                a._accum(g * y)

        return Tensor._make(out_data, (self,), bwd, "exp")

    def log(self):
        out_data = np.log(self.data)

        def bwd(g, a=self):
            if a.requires_grad:
                a._accum(g / a.data)

        return Tensor._make(out_data, (self,), bwd, "log")

    def tanh(self):
        out_data = np.tanh(self.data)

        def bwd(g, a=self, y=out_data):
            if a.requires_grad:
                a._accum(g * (1.0 - y * y))

        return Tensor._make(out_data, (self,), bwd, "tanh")

    def gelu(self):
        x = self.data
        inv_sqrt2 = 1.0 / math.sqrt(2.0)
        cdf = 0.5 * (1.0 + erf(x * inv_sqrt2))
        out_data = x * cdf

        def bwd(g, a=self, cdf=cdf):
            if a.requires_grad:
                x = a.data
                pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
                a._accum(g * (cdf + x * pdf))

        return Tensor._make(out_data, (self,), bwd, "gelu")

    def sin(self):
        out_data = np.sin(self.data)

        def bwd(g, a=self):
            if a.requires_grad:
                a._accum(g * np.cos(a.data))

        return Tensor._make(out_data, (self,), bwd, "sin")

    def cos(self):
        out_data = np.cos(self.data)

        def bwd(g, a=self):
            if a.requires_grad:
                a._accum(-g * np.sin(a.data))

        return Tensor._make(out_data, (self,), bwd, "cos")

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def bwd(g, a=self):
            if a.requires_grad:
                a._accum(g.reshape(a.shape))

        return Tensor._make(out_data, (self,), bwd, "reshape")

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out_data = self.data.transpose(axes)

        def bwd(g, a=self, inv=tuple(inv)):
            if a.requires_grad:
                a._accum(g.transpose(inv))

        return Tensor._make(out_data, (self,), bwd, "transpose")

    def swap_last(self):
        """Swap the last two axes (matrix transpose over batch dims)."""
        ax = list(range(self.ndim))
        ax[-1], ax[-2] = ax[-2], ax[-1]
        return self.transpose(*ax)

    def __getitem__(self, key):
        out_data = self.data[key]
        if np.isscalar(out_data) or out_data.ndim == 0:
            out_data = np.asarray(out_data)

        def bwd(g, a=self, key=key):
            if a.requires_grad:
                gx = np.zeros_like(a.data)
                np.add.at(gx, key, g)
                a._accum(gx)

        return Tensor._make(out_data, (self,), bwd, "getitem")

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g, a=self, axis=axis, keepdims=keepdims):
            if not a.requires_grad:
                return
            if axis is None:
                a._accum(np.broadcast_to(g, a.shape).copy())
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                a._accum(np.broadcast_to(g, a.shape).copy())

        return Tensor._make(np.asarray(out_data), (self,), bwd, "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def cumsum(self, axis):
        out_data = np.cumsum(self.data, axis=axis)

        def bwd(g, a=self, axis=axis):
            if a.requires_grad:
                rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
                a._accum(rev)

        return Tensor._make(out_data, (self,), bwd, "cumsum")

    # -- linear algebra ---------------------------------------------------------

    def matmul(self, other):
        other = as_tensor(other, self.dtype)
        out_data = np.matmul(self.data, other.data)

        def bwd(g, a=self, b=other):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accum(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accum(_unbroadcast(gb, b.shape))

        return Tensor._make(out_data, (self, other), bwd, "matmul")

    __matmul__ = matmul

    # -- gradient driver --------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into all requires_grad leaves."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


# -- composite / primitive ops -------------------------------------------------


def concat(tensors, axis=0):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, ts=tensors, axis=axis, offsets=offsets):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return Tensor._make(out_data, tuple(tensors), bwd, "concat")


def stack(tensors, axis=0):
    tensors = list(tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g, ts=tensors, axis=axis):
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return Tensor._make(out_data, tuple(tensors), bwd, "stack")


def softmax(x, axis=-1):
    """Numerically stable softmax along `axis`; slices sum to 1."""
    x = as_tensor(x)
    if x.data.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, a=x, y=y, axis=axis):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accum(y * (g - dot))

    return Tensor._make(y, (x,), bwd, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis to zero mean / unit population variance."""
    x = as_tensor(x)
    gain = as_tensor(gain, x.dtype)
    bias = as_tensor(bias, x.dtype)
    if x.shape[-1] == 0:
        raise ValueError("layer_norm over an empty last axis")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g, a=x, gn=gain, b=bias, xhat=xhat, inv=inv):
        if gn.requires_grad:
            gn._accum(_unbroadcast(g * xhat, gn.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))
        if a.requires_grad:
            gh = g * gn.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            a._accum((gh - m1 - xhat * m2) * inv)

    return Tensor._make(out_data, (x, gain, bias), bwd, "layer_norm")


def take_rows(x, idx):
    """Gather rows of `x` (first axis) by an integer index array.

    Output shape is ``idx.shape + x.shape[1:]``.
    """
    idx = np.asarray(idx)
    out_data = x.data[idx]

    def bwd(g, a=x, idx=idx):
        if a.requires_grad:
            gx = np.zeros_like(a.data)
            np.add.at(gx, idx.reshape(-1), g.reshape((-1,) + a.shape[1:]))
            a._accum(gx)

    return Tensor._make(out_data, (x,), bwd, "take_rows")


def take_rows_batched(x, idx):
    """Per-batch row gather: out[b, ...] = x[b, idx[b, ...], :].

    `x` is (B, N, d); `idx` is (B, ...) of int; output (B, ..., d).
    """
    idx = np.asarray(idx)
    B = x.shape[0]
    bsel = np.arange(B).reshape((B,) + (1,) * (idx.ndim - 1))
    out_data = x.data[bsel, idx]

    def bwd(g, a=x, idx=idx, bsel=bsel):
        if a.requires_grad:
            gx = np.zeros_like(a.data)
            np.add.at(gx, (np.broadcast_to(bsel, idx.shape).reshape(-1),
                           idx.reshape(-1)),
                      g.reshape(-1, a.shape[-1]))
            a._accum(gx)

    return Tensor._make(out_data, (x,), bwd, "take_rows_batched")


def attention(q, k, v, mask=None, scale=None):
    """Scaled dot-product attention.

    `q`: (..., Lq, d), `k`: (..., Lk, d), `v`: (..., Lk, dv). `mask`, if
    given, is an additive numpy array broadcastable to (..., Lq, Lk) with 0
    for kept keys and a large negative value for masked keys. Each output
    row is a convex combination of rows of `v`.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if k.shape[-2] == 0:
        raise ValueError("attention requires at least one key")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError("attention shape mismatch")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    logits = q.matmul(k.swap_last()) * scale
    if mask is not None:
        logits = logits + Tensor(np.asarray(mask, dtype=logits.dtype))
    w = softmax(logits, axis=-1)
    return w.matmul(v)


def mse(a, b):
    d = a - as_tensor(b, a.dtype)
    return (d * d).mean()
