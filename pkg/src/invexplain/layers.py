"""Invertible layers: additive coupling, Haar pooling and batch normalization.

Each layer maps a batch ``N x C x ...`` to a batch of the same number of
elements and exposes ``forward`` and an exact ``inverse``.  Parameters are
stored as :class:`~invexplain.autodiff.Tensor` values in ``params`` and are
replaced (never mutated) by the optimizer.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GAMMA_FLOOR = 1e-8


class ModeError(RuntimeError):
    """Operation not allowed in the module's current train/eval mode."""


class Module:
    """Minimal container for parameters, buffers and child modules.

    Traversal order (params, then buffers, then children, recursively) is
    the serialization order of checkpoints, so it must stay stable.
    """

    kind = "module"

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: list[Module] = []
        self.training = False

    def modules(self):
        yield self
        for c in self.children:
            yield from c.modules()

    def parameter_slots(self):
        """``(module, name)`` pairs for every trainable tensor, in stable order."""
        return [(m, k) for m in self.modules() for k in m.params]

    def state_arrays(self):
        out = []
        for m in self.modules():
            out.extend(m.params[k].data for k in m.params)
            out.extend(m.buffers[k] for k in m.buffers)
        return out

    def load_state_arrays(self, arrays):
        it = iter(arrays)
        for m in self.modules():
            for k, old in m.params.items():
                m.params[k] = _restore(next(it), old.shape, old.dtype, requires_grad=True)
            for k, old in m.buffers.items():
                m.buffers[k] = _restore(next(it), old.shape, old.dtype).data.copy()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for m in self.modules():
            for k, v in m.params.items():
                m.params[k] = Tensor(v.data, requires_grad=True, dtype=dtype)
            for k, v in m.buffers.items():
                m.buffers[k] = v.astype(dtype)
        return self


def _restore(arr, shape, dtype, requires_grad=False):
    arr = np.asarray(arr)
    if arr.shape != shape:
        raise ValueError(f"state array shape {arr.shape} != expected {shape}")
    return Tensor(arr, requires_grad=requires_grad, dtype=dtype)


def _uniform(rng, bound, shape, dtype):
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


# -- batch normalization -------------------------------------------------

class InvertibleBatchNorm(Module):
    """Channel-wise batch normalization with an exact eval-mode inverse.

    In train mode the batch mean and biased variance normalize the input and
    update the running statistics; with ``momentum=None`` the running
    statistics become the cumulative average of every batch seen since the
    last :meth:`reset_running_stats`.
    """

    kind = "batchnorm"

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.params["beta"] = _zeros(channels, dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._batches_seen = 0

    def reset_running_stats(self):
        dt = self.buffers["running_mean"].dtype
        self.buffers["running_mean"] = np.zeros(self.channels, dtype=dt)
        self.buffers["running_var"] = np.ones(self.channels, dtype=dt)
        self._batches_seen = 0

    def _update_running(self, mean, var):
        self._batches_seen += 1
        m = 1.0 / self._batches_seen if self.momentum is None else self.momentum
        for key, batch in (("running_mean", mean), ("running_var", var)):
            old = self.buffers[key]
            self.buffers[key] = ((1.0 - m) * old + m * batch).astype(old.dtype)

    def _eval_affine(self):
        inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
        return inv_std.astype(self.buffers["running_var"].dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ad.ShapeError(f"batchnorm expects {self.channels} channels, got {x.shape[1]}")
        gamma, beta = self.params["gamma"], self.params["beta"]
        if self.training:
            if x.size // self.channels < 2:
                raise ValueError("train-mode batchnorm needs at least 2 elements per channel")
            mean, var = ad.channel_stats(x)
            self._update_running(mean.data, var.data)
            s = ad.mul(gamma, ad.rsqrt(var, self.eps))
        else:
            mean = Tensor(self.buffers["running_mean"])
            s = ad.mul(gamma, Tensor(self._eval_affine()))
        shift = ad.sub(beta, ad.mul(mean, s))
        return ad.channel_affine(x, s, shift)

    def inverse(self, y: Tensor) -> Tensor:
        if self.training:
            raise ModeError("batchnorm inversion requires eval mode (running statistics)")
        gamma = self.params["gamma"].data
        if np.any(np.abs(gamma) < GAMMA_FLOOR):
            raise ValueError("batchnorm gamma too close to zero to invert")
        std = np.sqrt(self.buffers["running_var"] + self.eps)
        k = (std / gamma).astype(gamma.dtype)
        shift = (self.buffers["running_mean"] - self.params["beta"].data * k).astype(gamma.dtype)
        return ad.channel_affine(y, Tensor(k), Tensor(shift))


# -- residual function F -------------------------------------------------

class ResidualFunction(Module):
    """Shape-preserving function used inside a coupling block.

    ``variant='dense'``: Linear -> ReLU -> Linear on ``N x width``.
    ``variant='conv'``: Conv3x3 -> BatchNorm -> ReLU -> Conv3x3 on
    ``N x width x H x W``.  The last sublayer starts at zero.
    """

    kind = "residual"

    def __init__(self, variant, width, rng, hidden=None, dtype=np.float32):
        super().__init__()
        if variant not in ("dense", "conv"):
            raise ValueError(f"unknown residual variant {variant!r}")
        self.variant = variant
        self.width = width
        self.hidden = hidden or width
        h = self.hidden
        if variant == "dense":
            bound = np.sqrt(6.0 / width)
            self.params["w1"] = _uniform(rng, bound, (width, h), dtype)
            self.params["b1"] = _uniform(rng, 1.0 / np.sqrt(width), (h,), dtype)
            self.params["w2"] = _zeros((h, width), dtype)
            self.params["b2"] = _zeros(width, dtype)
        else:
            fan_in = width * 9
            self.params["k1"] = _uniform(rng, np.sqrt(6.0 / fan_in), (h, width, 3, 3), dtype)
            self.params["b1"] = _uniform(rng, 1.0 / np.sqrt(fan_in), (h,), dtype)
            self.params["k2"] = _zeros((width, h, 3, 3), dtype)
            self.params["b2"] = _zeros(width, dtype)
            self.bn = InvertibleBatchNorm(h, dtype=dtype)
            self.children.append(self.bn)

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        if self.variant == "dense":
            h = ad.relu(ad.channel_affine(ad.matmul(x, p["w1"]), shift=p["b1"]))
            return ad.channel_affine(ad.matmul(h, p["w2"]), shift=p["b2"])
        h = ad.relu(self.bn.forward(ad.conv2d(x, p["k1"], p["b1"])))
        return ad.conv2d(h, p["k2"], p["b2"])


# -- coupling ------------------------------------------------------------

class CouplingBlock(Module):
    """Additive coupling: ``(x1, x2) -> (x2 + F(x1), x1)``.

    The input is split into its first and second half along axis 1.
    """

    kind = "coupling"

    def __init__(self, F: ResidualFunction):
        super().__init__()
        self.F = F
        self.children.append(F)

    def _halves(self, x):
        c = x.shape[1]
        if c % 2:
            raise ad.ShapeError(f"coupling needs an even channel count, got {c}")
        h = c // 2
        return ad.take_channels(x, 0, h), ad.take_channels(x, h, c)

    def forward(self, x: Tensor) -> Tensor:
        x1, x2 = self._halves(x)
        return ad.concat([ad.add(x2, self.F(x1)), x1], axis=1)

    def inverse(self, y: Tensor) -> Tensor:
        y1, y2 = self._halves(y)
        return ad.concat([y2, ad.sub(y1, self.F(y2))], axis=1)


# -- Haar pooling --------------------------------------------------------

def haar_forward_array(x):
    """Level-1 orthonormal 2D Haar transform, ``N x C x H x W -> N x 4C x H/2 x W/2``.

    Output channel ``4c + k`` holds sub-band ``k`` in the order LL, LH, HL, HH.
    """
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ad.ShapeError(f"Haar pooling needs even spatial size, got {H}x{W}")
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    c = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    half = x.dtype.type(0.5)
    bands = np.stack([a + b + c + d, a - b + c - d, a + b - c - d, a - b - c + d], axis=2)
    return (bands * half).reshape(N, 4 * C, H // 2, W // 2)


def haar_inverse_array(y):
    N, C4, h, w = y.shape
    if C4 % 4:
        raise ad.ShapeError(f"inverse Haar needs channels divisible by 4, got {C4}")
    C = C4 // 4
    bands = y.reshape(N, C, 4, h, w)
    ll, lh, hl, hh = (bands[:, :, k] for k in range(4))
    half = y.dtype.type(0.5)
    x = np.empty((N, C, 2 * h, 2 * w), dtype=y.dtype)
    x[:, :, 0::2, 0::2] = (ll + lh + hl + hh) * half
    x[:, :, 0::2, 1::2] = (ll - lh + hl - hh) * half
    x[:, :, 1::2, 0::2] = (ll + lh - hl - hh) * half
    x[:, :, 1::2, 1::2] = (ll - lh - hl + hh) * half
    return x


def haar_forward(x: Tensor) -> Tensor:
    # orthogonal map: the adjoint is the inverse
    return ad.apply_op(haar_forward_array(x.data), (x,), lambda g: (haar_inverse_array(g),), "haar")


def haar_inverse(y: Tensor) -> Tensor:
    return ad.apply_op(haar_inverse_array(y.data), (y,), lambda g: (haar_forward_array(g),), "haar_inv")


class HaarPooling(Module):
    kind = "haar"

    def forward(self, x: Tensor) -> Tensor:
        return haar_forward(x)

    def inverse(self, y: Tensor) -> Tensor:
        return haar_inverse(y)
