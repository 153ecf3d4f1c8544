"""Toy dataset generators, IDX image loading and CSV export."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Stacked inputs ``features`` (``N x ...``) with integer ``labels``."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels must lie in [0, class_count)")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, **extra):
        idx = np.asarray(idx, dtype=np.int64)
        prov = dict(self.provenance, **extra)
        return Dataset(self.features[idx], self.labels[idx], self.class_count, prov)


def moon_point(theta, label):
    """Noise-free two-moons point for angle ``theta`` and class ``label``."""
    theta = np.asarray(theta, dtype=np.float64)
    if label == 0:
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    return np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=-1)


def two_moons(n=2000, noise=0.1, seed=0, dtype=np.float32) -> Dataset:
    """Two interleaving half circles, ``n/2`` points per class."""
    if n < 2 or n % 2:
        raise ValueError("two_moons needs an even n >= 2")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    half = n // 2
    theta = rng.uniform(0.0, np.pi, size=(2, half))
    pts = np.concatenate([moon_point(theta[0], 0), moon_point(theta[1], 1)])
    pts = pts + noise * rng.standard_normal(pts.shape)
    labels = np.repeat([0, 1], half)
    prov = {"generator": "two_moons", "n": n, "noise": noise, "seed": seed}
    return Dataset(pts.astype(dtype), labels, 2, prov)


def synthetic_informative(n=1000, total_dims=10, informative=(1, 3, 9), seed=0,
                          shift=1.5, dtype=np.float32) -> Dataset:
    """Binary data where only the ``informative`` coordinates depend on the label.

    Informative coordinates are ``N(-shift, 1)`` for class 0 and
    ``N(+shift, 1)`` for class 1; the rest are standard normal noise.
    """
    informative = [int(i) for i in informative]
    if len(set(informative)) != len(informative):
        raise ValueError("informative indices must be distinct")
    if any(i < 0 or i >= total_dims for i in informative):
        raise ValueError(f"informative indices must lie in [0, {total_dims})")
    if n < 2:
        raise ValueError("need n >= 2")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2)
    X = rng.standard_normal((n, total_dims))
    signs = np.where(labels == 1, 1.0, -1.0)
    X[:, informative] += shift * signs[:, None]
    prov = {"generator": "synthetic_informative", "n": n, "total_dims": total_dims,
            "informative": informative, "shift": shift, "seed": seed}
    return Dataset(X.astype(dtype), labels, 2, prov)


def split(dataset: Dataset, fraction: float, seed=0):
    """Stratified split into ``(train, test)``; original order is preserved in both.

    Each class contributes ``round(fraction * count)`` training samples,
    at least one.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            raise ValueError(f"class {c} has no samples")
        k = max(1, int(round(fraction * idx.size)))
        chosen.append(rng.choice(idx, size=k, replace=False))
    mask = np.zeros(len(dataset), dtype=bool)
    mask[np.concatenate(chosen)] = True
    return (dataset.subset(np.flatnonzero(mask), split=fraction, split_seed=seed),
            dataset.subset(np.flatnonzero(~mask), split=fraction, split_seed=seed))


# -- IDX -----------------------------------------------------------------

def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic, ndim):
    with _open(path) as fh:
        blob = fh.read()
    if len(blob) < 4 + 4 * ndim:
        raise IDXFormatError(f"{path}: truncated header")
    got = struct.unpack(">I", blob[:4])[0]
    if got != magic:
        raise IDXFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", blob[4:4 + 4 * ndim])
    body = blob[4 + 4 * ndim:]
    need = int(np.prod(dims, dtype=np.int64))
    if len(body) < need:
        raise IDXFormatError(f"{path}: payload has {len(body)} bytes, header declares {need}")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def load_idx(images_path, labels_path, class_count=10) -> Dataset:
    """Load IDX images/labels (optionally gzipped) as ``N x 1 x H x W`` floats in [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IDXFormatError(f"{len(images)} images but {len(labels)} labels")
    X = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    prov = {"generator": "idx", "images": str(images_path), "labels": str(labels_path)}
    return Dataset(X, labels.astype(np.int64), class_count, prov)


def write_idx(images, labels, images_path, labels_path):
    """Write ``uint8`` images (``N x H x W``) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# -- CSV -----------------------------------------------------------------

def to_csv(dataset: Dataset, path):
    """One row per sample: flattened features then the label."""
    X = dataset.features.reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(X.shape[1])] + ["label"])
        for row, lab in zip(X, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def read_csv(path, class_count=None, dtype=np.float32) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][-1] != "label":
        raise ValueError(f"{path}: missing header with trailing 'label' column")
    body = rows[1:]
    X = np.array([[float(v) for v in r[:-1]] for r in body], dtype=dtype).reshape(len(body), len(rows[0]) - 1)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    k = class_count if class_count is not None else (int(y.max()) + 1 if len(y) else 1)
    return Dataset(X, y, k, {"generator": "csv", "path": str(path)})
