"""Two-stage invertible classifier ``t = T(x)``, ``y = W t + b``, plus checkpoints."""
from __future__ import annotations

import copy
import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    CouplingBlock,
    HaarPooling,
    InvertibleBatchNorm,
    ModeError,
    Module,
    ResidualFunction,
)

FORMAT_VERSION = 1
_DTYPES = {"float32": np.float32, "float64": np.float64}


class CheckpointError(ValueError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class NetworkSpec:
    """Architecture description.

    ``input_shape`` is ``(d,)`` for vector inputs or ``(C, H, W)`` for images.
    ``stages`` lists coupling blocks per stage; image stages are joined by
    Haar pooling.  ``hidden`` overrides the inner width of each residual
    function (default: equal to the half-width it acts on).
    """

    input_shape: tuple
    stages: list
    class_count: int
    initial_bn: bool = True
    initial_pool: bool = False
    dtype: str = "float32"
    hidden: int | None = None

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.stages = [int(s) for s in self.stages]

    @property
    def input_kind(self):
        return "vector" if len(self.input_shape) == 1 else "image"

    def validate(self):
        if len(self.input_shape) not in (1, 3):
            raise ValueError("input_shape must be (d,) or (C, H, W)")
        if not self.stages:
            raise ValueError("network needs at least one stage")
        if any(s < 1 for s in self.stages):
            raise ValueError("every stage needs at least one coupling block")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.initial_pool and self.input_kind == "vector":
            raise ValueError("initial_pool applies to image inputs only")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class LinearHead(Module):
    """Global average pooling ``B`` followed by a dense layer ``A``; ``W = A B``."""

    kind = "head"

    def __init__(self, pool_shape, class_count, rng, dtype=np.float32):
        super().__init__()
        self.pool_shape = tuple(pool_shape)
        C = self.pool_shape[0]
        hw = int(np.prod(self.pool_shape[1:], dtype=int))
        self.B = np.kron(np.eye(C), np.full((1, hw), 1.0 / hw)).astype(dtype)
        bound = 1.0 / np.sqrt(C)
        self.params["A"] = Tensor(rng.uniform(-bound, bound, (class_count, C)), requires_grad=True, dtype=dtype)
        self.params["b"] = Tensor(np.zeros(class_count), requires_grad=True, dtype=dtype)
        self._w_cache = (None, None)

    @property
    def W(self):
        """Cached ``K x (C h w)`` product ``A B``."""
        A = self.params["A"]
        if self._w_cache[0] is not A:
            self._w_cache = (A, A.data @ self.B)
        return self._w_cache[1]

    @property
    def bias(self):
        return self.params["b"].data

    def __call__(self, t: Tensor) -> Tensor:
        if t.ndim != 2 or t.shape[1] != self.B.shape[1]:
            raise ad.ShapeError(f"head expects N x {self.B.shape[1]} features, got {t.shape}")
        W = ad.matmul(self.params["A"], Tensor(self.B))
        return ad.channel_affine(ad.matmul(t, ad.transpose(W)), shift=self.params["b"])

    def astype(self, dtype):
        super().astype(dtype)
        self.B = self.B.astype(dtype)
        self._w_cache = (None, None)
        return self


def softmax(y):
    """Row-wise softmax of an ``N x K`` array (max-shifted)."""
    y = np.asarray(y, dtype=np.float64)
    z = np.exp(y - y.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


class InvertibleNet(Module):
    """Invertible feature map ``T`` (ordered layers) followed by a linear head."""

    kind = "net"

    def __init__(self, spec: NetworkSpec, layers, head: LinearHead, feature_shape):
        super().__init__()
        self.spec = spec
        self.layers = list(layers)
        self.head = head
        self.feature_shape = tuple(feature_shape)
        self.children.extend(self.layers)
        self.children.append(head)

    @property
    def dtype(self):
        return _DTYPES[self.spec.dtype]

    @property
    def feature_dim(self):
        return int(np.prod(self.feature_shape))

    def _as_input(self, x, shape):
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.dtype)
        if t.dtype != self.dtype:
            t = ad.as_tensor(t, self.dtype)
        if t.shape[1:] != tuple(shape):
            raise ad.ShapeError(f"expected N x {tuple(shape)}, got {t.shape}")
        return t

    def forward_features(self, x) -> Tensor:
        """``t = T(x)`` flattened channel-major to ``N x feature_dim``."""
        h = self._as_input(x, self.spec.input_shape)
        for layer in self.layers:
            h = layer.forward(h)
        return ad.reshape(h, (h.shape[0], self.feature_dim))

    def inverse_features(self, t) -> Tensor:
        """``x = T^{-1}(t)``; requires eval mode."""
        if self.training:
            raise ModeError("inverse_features requires eval mode")
        h = self._as_input(t, (self.feature_dim,))
        h = ad.reshape(h, (h.shape[0],) + self.feature_shape)
        for layer in reversed(self.layers):
            h = layer.inverse(h)
        return h

    def logits(self, t) -> Tensor:
        return self.head(self._as_input(t, (self.feature_dim,)))

    def __call__(self, x) -> Tensor:
        return self.logits(self.forward_features(x))

    def predict_proba(self, x):
        return softmax(self(x).data)

    def astype(self, dtype):
        super().astype(dtype)
        self.spec.dtype = np.dtype(dtype).name
        return self

    def copy(self):
        return copy.deepcopy(self)


def build_network(spec: NetworkSpec, seed: int = 0) -> InvertibleNet:
    """Deterministically initialize an :class:`InvertibleNet` for ``spec``."""
    spec = copy.deepcopy(spec)
    spec.validate()
    dtype = _DTYPES[spec.dtype]
    rng = np.random.default_rng(seed)
    shape = list(spec.input_shape)
    layers = []

    def pool():
        if shape[1] % 2 or shape[2] % 2:
            raise ValueError(f"cannot Haar-pool spatial size {shape[1]}x{shape[2]}")
        layers.append(HaarPooling())
        shape[:] = [shape[0] * 4, shape[1] // 2, shape[2] // 2]

    if spec.initial_bn:
        layers.append(InvertibleBatchNorm(shape[0], dtype=dtype))
    if spec.initial_pool:
        pool()
    variant = "dense" if spec.input_kind == "vector" else "conv"
    for i, blocks in enumerate(spec.stages):
        if i > 0 and spec.input_kind == "image":
            pool()
        if shape[0] % 2:
            raise ValueError(f"coupling blocks need an even channel/feature count, got {shape[0]}")
        for _ in range(blocks):
            F = ResidualFunction(variant, shape[0] // 2, rng, hidden=spec.hidden, dtype=dtype)
            layers.append(CouplingBlock(F))

    head = LinearHead(shape, spec.class_count, rng, dtype=dtype)
    return InvertibleNet(spec, layers, head, shape).eval()


# -- checkpoints ---------------------------------------------------------

def _manifest(net: InvertibleNet, payload: bytes):
    layers = []
    for i, m in enumerate(net.modules()):
        arrays = [{"name": k, "shape": list(v.shape)} for k, v in m.params.items()]
        arrays += [{"name": k, "shape": list(v.shape)} for k, v in m.buffers.items()]
        layers.append({"index": i, "kind": m.kind, "arrays": arrays})
    return {
        "format_version": FORMAT_VERSION,
        "spec": net.spec.to_dict(),
        "float_width": 8 * np.dtype(net.dtype).itemsize,
        "final_bn_before_head": False,
        "layers": layers,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }


def checkpoint_bytes(net: InvertibleNet) -> bytes:
    le = np.dtype(net.dtype).newbyteorder("<")
    payload = b"".join(np.ascontiguousarray(a, dtype=le).tobytes() for a in net.state_arrays())
    header = json.dumps(_manifest(net, payload), sort_keys=True, separators=(",", ":"))
    return header.encode("utf-8") + b"\n" + payload


def save_checkpoint(net: InvertibleNet, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def checkpoint_from_bytes(blob: bytes) -> InvertibleNet:
    head, sep, payload = blob.partition(b"\n")
    if not sep:
        raise TruncatedCheckpointError("checkpoint manifest is incomplete")
    try:
        manifest = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint format_version {version!r}")
    if len(payload) != manifest["payload_bytes"]:
        raise TruncatedCheckpointError(
            f"payload has {len(payload)} bytes, manifest declares {manifest['payload_bytes']}")
    if zlib.crc32(payload) != manifest["payload_crc32"]:
        raise ChecksumError("checkpoint payload CRC-32 mismatch")

    spec = NetworkSpec.from_dict(manifest["spec"])
    net = build_network(spec, seed=0)
    le = np.dtype(net.dtype).newbyteorder("<")
    flat = np.frombuffer(payload, dtype=le)
    arrays, offset = [], 0
    for layer in manifest["layers"]:
        for entry in layer["arrays"]:
            n = int(np.prod(entry["shape"], dtype=int))
            arrays.append(flat[offset:offset + n].reshape(entry["shape"]).astype(net.dtype))
            offset += n
    if offset != flat.size or len(arrays) != len(net.state_arrays()):
        raise CheckpointError("checkpoint layer list does not match its spec")
    net.load_state_arrays(arrays)
    return net.eval()


def load_checkpoint(path) -> InvertibleNet:
    return checkpoint_from_bytes(Path(path).read_bytes())
