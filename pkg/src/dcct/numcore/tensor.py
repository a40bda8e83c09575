"""Dense float32 tensors with a recorded computation graph.

Every operation returns a new, immutable :class:`Tensor`. When gradient
recording is enabled and at least one operand requires a gradient, the
result remembers its parents together with a closure that maps the upstream
gradient onto per-parent gradients. :func:`backward` walks that graph in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
MAX_RANK = 4


class NumcoreError(Exception):
    pass


class ShapeError(NumcoreError, ValueError):
    """Operand extents are incompatible with the operation."""


class EmptyInputError(ShapeError):
    pass


class NonFiniteError(NumcoreError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(NumcoreError):
    pass


class MissingGradientError(NumcoreError):
    """A requested parameter does not take part in the recorded graph."""


# per-thread, so worker pools running inference cannot switch recording off
# for a training loop on another thread
_local = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (current thread only)."""
    prev = is_grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = prev


def is_grad_enabled() -> bool:
    return getattr(_local, "grad", True)


def _check_finite(arr, op):
    # any NaN/Inf element makes the sum non-finite
    if arr.size and not np.isfinite(np.add.reduce(arr, axis=None)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_op")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        _check_finite(arr, "tensor construction")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"{op}: rank {arr.ndim} exceeds {MAX_RANK}")
        _check_finite(arr, op)
        arr.flags.writeable = False
        out.data = arr
        out.name = None
        out._op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, op={self._op})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), bw, "div")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a):
    a = as_tensor(a)
    out = DTYPE(0.5) * (DTYPE(1) + np.tanh(DTYPE(0.5) * a.data))
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(a):
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        s = 0.5 * (1 + np.tanh(0.5 * x))
        return (g * s,)

    return Tensor._from_op(out, (a,), bw, "softplus")


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, a.data * DTYPE(slope))
    return Tensor._from_op(out, (a,), lambda g: (np.where(pos, g, g * DTYPE(slope)),), "leaky_relu")


def maximum(a, floor: float):
    """Elementwise max against a constant; gradient passes only above the floor."""
    a = as_tensor(a)
    keep = a.data > floor
    out = np.where(keep, a.data, DTYPE(floor))
    return Tensor._from_op(out, (a,), lambda g: (g * keep,), "maximum")


def clamp(a, lo: float, hi: float):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# ----------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(DTYPE),)

    return Tensor._from_op(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if n == 0:
        raise EmptyInputError("mean over empty axis")
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64) / n

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / DTYPE(n), a.shape).astype(DTYPE),)

    return Tensor._from_op(out, (a,), bw, "mean")


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    a = as_tensor(a)

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return Tensor._from_op(a.data[idx], (a,), bw, "getitem")


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise EmptyInputError("concat of nothing")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return Tensor._from_op(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw, "concat")


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), bw, "softmax")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents {a.shape[-1]} != {b.shape[-2]}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), bw, "matmul")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def bw(g):
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        gx_hat = g * gamma.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), bw, "layer_norm")


# ----------------------------------------------------------------------------
# spatial ops (N x C x H x W)


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlate ``x`` (N,C,H,W) with ``kernel`` (O,C,kh,kw), zero padded."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.size == 0:
        raise EmptyInputError("conv2d on empty input")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 operands, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"input has {c} channels, kernel expects {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be positive and padding non-negative")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError("kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wmat = kernel.data.reshape(o, -1)
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride].reshape(n, c, ho * wo)
    else:
        # N x C x kh x kw x Ho x Wo, flattened to N x (C*kh*kw) x (Ho*Wo)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    out = wmat @ cols
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
    out = out.reshape(n, o, ho, wo)

    def bw(g):
        g3 = g.reshape(n, o, ho * wo)
        gk = None
        if kernel.requires_grad:
            gk = np.einsum("nop,nqp->oq", g3, cols, optimize=True).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g3).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, parents, bw, "conv2d")


def avg_pool2(x):
    """2x2 average pooling with stride 2; extents must be even."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even extents, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * DTYPE(0.25),)

    return Tensor._from_op(out, (x,), bw, "avg_pool2")


def upsample2(x):
    """Nearest-neighbour upsampling by a factor of two."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), bw, "upsample2")


# ----------------------------------------------------------------------------
# reverse pass


@dataclass(frozen=True)
class GradientRecord:
    name: str
    grad: np.ndarray


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None) -> list[GradientRecord]:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    ``params`` is a sequence of leaf tensors or a name->tensor mapping. When
    omitted, every reachable leaf that requires a gradient is reported.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward() needs a scalar loss tensor")
    if isinstance(params, dict):
        named = list(params.items())
    elif params is not None:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]
    else:
        named = None

    grads = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves = {}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                leaves[id(node)] = (node, g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=DTYPE)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    if named is None:
        return [GradientRecord(node.name or f"leaf{i}", g) for i, (node, g) in enumerate(leaves.values())]
    records = []
    for name, p in named:
        if id(p) not in leaves:
            raise MissingGradientError(f"parameter {name!r} is not on the recorded graph")
        g = leaves[id(p)][1]
        _check_finite(g, f"gradient of {name}")
        records.append(GradientRecord(name, np.ascontiguousarray(g.reshape(p.shape))))
    return records
