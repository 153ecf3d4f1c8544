"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps an immutable numpy array.  Operations build an
implicit acyclic graph: each result remembers its parents and a function
mapping the upstream gradient to one gradient per parent.  Calling
:meth:`Tensor.backward` on a scalar result walks that graph once in
reverse topological order.

Only the handful of operations needed by invertible classifiers are
provided.  Broadcasting is deliberately limited to per-channel scale and
shift (:func:`channel_affine`); every other shape mismatch is an error.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class NonFiniteError(ValueError):
    """Raised when a NaN or infinity would be stored in a tensor."""


class ShapeError(ValueError):
    """Raised on incompatible operand shapes."""


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value in result of {op!r}")


class Tensor:
    """N-dimensional float array that can participate in backpropagation.

    Parameters
    ----------
    data : array-like
        Values, copied on construction.
    requires_grad : bool
        Whether ``backward`` should populate ``grad`` for this tensor.
    dtype : numpy dtype, optional
        ``float32`` or ``float64``.  Defaults to the dtype of ``data`` when
        it is already a float array, else ``float32``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            dtype = getattr(data, "dtype", None)
            if dtype not in (np.float32, np.float64):
                dtype = DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported dtype {arr.dtype}")
        _check_finite(arr, "leaf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @classmethod
    def _result(cls, arr, parents, backward, op):
        arr = np.asarray(arr)
        _check_finite(arr, op)
        arr.flags.writeable = False
        out = cls.__new__(cls)
        out.data = arr
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def astype(self, dtype):
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x if dtype is None or x.dtype == dtype else x.astype(dtype)
    return Tensor(x, dtype=dtype)


def apply_op(out, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap a raw array result as a graph node.

    ``backward_fn(g)`` receives the upstream gradient (same shape as ``out``)
    and must return one array or ``None`` per parent.
    """
    return Tensor._result(out, parents, backward_fn, op)


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` tensor reachable from ``root``.

    Leaf gradients accumulate across calls; intermediate gradients are
    overwritten.  Tensors not connected to ``root`` keep their ``grad``.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return

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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node))
        if node._parents:
            node.grad = g
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"gradient shape {pg.shape} != {p.shape} in {node.op}")
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
        else:
            node.grad = g.astype(node.dtype, copy=True) if node.grad is None else node.grad + g


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return apply_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return apply_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return apply_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError("scale constant must be finite")
    k = a.dtype.type(c)
    return apply_op(a.data * k, (a,), lambda g: (g * k,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return apply_op(np.where(mask, a.data, 0).astype(a.dtype), (a,),
                    lambda g: (g * mask,), "relu")


def rsqrt(a: Tensor, eps: float = 0.0) -> Tensor:
    """Elementwise ``1 / sqrt(a + eps)``."""
    out = 1.0 / np.sqrt(a.data + a.dtype.type(eps))
    return apply_op(out, (a,), lambda g: (g * (-0.5) * out ** 3,), "rsqrt")


_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul`` take a tensor ``b``;
    ``scale`` takes a float constant ``b``; ``relu`` takes nothing."""
    if kind in _BINARY:
        if not isinstance(b, Tensor):
            raise TypeError(f"{kind} needs a second tensor")
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(a, b)
    if kind == "relu":
        return relu(a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- shape plumbing ------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    return apply_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a rank-2 tensor")
    return apply_op(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return apply_op(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back, "concat")


def take_channels(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` along axis 1."""
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"channel slice [{start}, {stop}) out of range for {a.shape}")
    idx = (slice(None), slice(start, stop))

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return apply_op(a.data[idx].copy(), (a,), back, "take_channels")


# -- reductions ----------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    return apply_op(a.data.sum(dtype=a.dtype), (a,),
                    lambda g: (np.full(a.shape, g, dtype=a.dtype),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return apply_op(a.data.mean(dtype=a.dtype), (a,),
                    lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean")


def _channel_axes(x):
    if x.ndim < 2:
        raise ShapeError("channel ops need rank >= 2 (N x C x ...)")
    return (0,) + tuple(range(2, x.ndim))


def _per_channel(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def channel_stats(x: Tensor):
    """Per-channel mean and biased variance over every non-channel axis."""
    axes = _channel_axes(x)
    count = x.size // x.shape[1] if x.shape[1] else 0
    if count == 0:
        raise ShapeError("channel_stats on an empty batch")
    m = x.data.mean(axis=axes)
    centered = x.data - _per_channel(m, x.ndim)
    v = (centered ** 2).mean(axis=axes)
    mean = apply_op(m, (x,), lambda g: (np.broadcast_to(_per_channel(g / count, x.ndim), x.shape).copy(),),
                    "channel_mean")
    var = apply_op(v, (x,), lambda g: (_per_channel(2.0 * g / count, x.ndim) * centered,), "channel_var")
    return mean, var


def channel_affine(x: Tensor, scale_: Tensor | None = None, shift: Tensor | None = None) -> Tensor:
    """``x * scale[c] + shift[c]`` with ``c`` the axis-1 index."""
    if x.ndim < 2:
        raise ShapeError("channel_affine needs rank >= 2")
    C = x.shape[1]
    for v in (scale_, shift):
        if v is not None and v.shape != (C,):
            raise ShapeError(f"per-channel vector must have shape ({C},), got {v.shape}")
    axes = _channel_axes(x)
    out = x.data
    if scale_ is not None:
        out = out * _per_channel(scale_.data, x.ndim)
    if shift is not None:
        out = out + _per_channel(shift.data, x.ndim)
    parents = [x]
    if scale_ is not None:
        parents.append(scale_)
    if shift is not None:
        parents.append(shift)

    def back(g):
        grads = [g * _per_channel(scale_.data, x.ndim) if scale_ is not None else g]
        if scale_ is not None:
            grads.append((g * x.data).sum(axis=axes))
        if shift is not None:
            grads.append(g.sum(axis=axes))
        return tuple(grads)

    return apply_op(out, parents, back, "channel_affine")


# -- linear algebra ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimension mismatch {a.shape} @ {b.shape}")
    return apply_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def _correlate(x, k):
    """Same-size, stride-1 cross-correlation of N x C x H x W with O x C x s x s."""
    pad = k.shape[2] // 2
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = sliding_window_view(x, k.shape[2:], axis=(2, 3))
        return np.einsum("nchwij,ocij->nohw", win, k, optimize=True), win
    return np.einsum("nchw,oc->nohw", x, k[:, :, 0, 0], optimize=True), None


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, zero-padded 2D cross-correlation preserving spatial size."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects N x C x H x W input and O x C x k x k kernel")
    O, C, kh, kw = kernel.shape
    if (kh, kw) not in ((3, 3), (1, 1)):
        raise ShapeError(f"unsupported kernel size {kh}x{kw}")
    if x.shape[1] != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {C}")
    if bias.shape != (O,):
        raise ShapeError(f"bias must have shape ({O},)")
    y, win = _correlate(x.data, kernel.data)
    y = y + bias.data.reshape(1, O, 1, 1)

    def back(g):
        flipped = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx, _ = _correlate(g, flipped)
        if win is None:
            gk = np.einsum("nohw,nchw->oc", g, x.data, optimize=True)[:, :, None, None]
        else:
            gk = np.einsum("nohw,nchwij->ocij", g, win, optimize=True)
        return gx, gk, g.sum(axis=(0, 2, 3))

    return apply_op(y.astype(x.dtype, copy=False), (x, kernel, bias), back, "conv2d")
