"""Dataset loading: MNIST IDX, CIFAR-10 binary batches and synthetic blobs."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .stats import keyed_generator

__all__ = [
    "ParseError",
    "Dataset",
    "load_idx",
    "save_idx",
    "load_mnist",
    "load_cifar10",
    "save_cifar10",
    "synth_blobs",
    "standardize",
    "stratified_subset",
]

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 3073

_SUBSET_DOMAIN = 4
_BLOB_DOMAIN = 5


class ParseError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx], metadata=dict(self.metadata))


def standardize(ds: Dataset, mean=None, std=None) -> Dataset:
    """Per-channel standardization; constants default to the split's own statistics."""
    x = ds.images
    axes = (0,) + tuple(range(2, x.ndim))
    if mean is None:
        mean = np.mean(x, axis=axes, dtype=np.float64)
    if std is None:
        std = np.std(x, axis=axes, dtype=np.float64)
        std = np.where(std > 1e-12, std, 1.0)
    mean, std = np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    out = (x - mean.reshape(bshape)) / std.reshape(bshape)
    meta = dict(ds.metadata, channel_mean=mean.tolist(), channel_std=std.tolist())
    return replace(ds, images=out, metadata=meta)


def _read_header(data: bytes, path, magic: int, ndims: int) -> tuple[int, ...]:
    need = 4 + 4 * ndims
    if len(data) < need:
        raise ParseError(f"{path}: truncated header, need {need} bytes, have {len(data)}", len(data))
    found = struct.unpack_from(">I", data, 0)[0]
    if found != magic:
        raise ParseError(f"{path}: bad magic, expected 0x{magic:08x}, found 0x{found:08x}", 0)
    return struct.unpack_from(f">{ndims}I", data, 4)


def load_idx(images_path, labels_path, standardized: bool = True, split: str = "train") -> Dataset:
    """Parse a big-endian IDX image/label file pair.

    Pixels are scaled by 1/255; with ``standardized`` they are then
    standardized per channel and the constants stored in ``metadata``.
    """
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    n, rows, cols = _read_header(img, images_path, IDX_IMAGES, 3)
    (nl,) = _read_header(lab, labels_path, IDX_LABELS, 1)
    if n != nl:
        raise ParseError(f"image count {n} != label count {nl}", 4)
    expect = 16 + n * rows * cols
    if len(img) != expect:
        raise ParseError(f"{images_path}: expected {expect} bytes, found {len(img)}", min(len(img), expect))
    if len(lab) != 8 + n:
        raise ParseError(f"{labels_path}: expected {8 + n} bytes, found {len(lab)}", min(len(lab), 8 + n))
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    ds = Dataset(pixels.astype(np.float64) / 255.0, labels, max(10, int(labels.max(initial=0)) + 1), split,
                 {"source": "idx", "scale": 1 / 255})
    return standardize(ds) if standardized else ds


def _to_uint8(ds: Dataset) -> np.ndarray:
    x = ds.images
    if "channel_mean" in ds.metadata:
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        x = x * np.asarray(ds.metadata["channel_std"]).reshape(bshape) + np.asarray(ds.metadata["channel_mean"]).reshape(bshape)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx`, undoing any standardization recorded in metadata."""
    pixels = _to_uint8(ds)
    n, c, rows, cols = pixels.shape
    if c != 1:
        raise ValueError("IDX images must be single-channel")
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, n) + ds.labels.astype(np.uint8).tobytes())


def load_mnist(root, split: str = "train", standardized: bool = True) -> Dataset:
    """Load ``train`` or ``t10k`` files from a directory of raw MNIST IDX files."""
    root = Path(root)
    prefix = "train" if split == "train" else "t10k"
    for sep in (".", "-"):
        img = root / f"{prefix}-images{sep}idx3-ubyte"
        lab = root / f"{prefix}-labels{sep}idx1-ubyte"
        if img.exists() and lab.exists():
            return load_idx(img, lab, standardized, split)
    raise FileNotFoundError(f"no {prefix} IDX files under {root}")


def load_cifar10(batch_files, standardized: bool = True, split: str = "train") -> Dataset:
    """Parse CIFAR-10 binary batches of 3073-byte records (label, then 3x32x32 pixels)."""
    if isinstance(batch_files, (str, Path)):
        batch_files = [batch_files]
    parts = []
    for path in batch_files:
        data = Path(path).read_bytes()
        if len(data) % CIFAR_RECORD:
            whole = len(data) // CIFAR_RECORD
            raise ParseError(f"{path}: truncated record {whole}", whole * CIFAR_RECORD)
        parts.append(np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    recs = np.concatenate(parts) if parts else np.zeros((0, CIFAR_RECORD), np.uint8)
    labels = recs[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ParseError(f"label {labels[bad]} out of range in record {bad}", bad * CIFAR_RECORD)
    images = recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    ds = Dataset(images, labels, 10, split, {"source": "cifar10", "scale": 1 / 255})
    return standardize(ds) if standardized and len(ds) else ds


def save_cifar10(ds: Dataset, path) -> None:
    pixels = _to_uint8(ds).reshape(len(ds), -1)
    recs = np.concatenate([ds.labels.astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(recs.tobytes())


def synth_blobs(classes: int = 2, samples: int = 64, dims=8, seed: int = 0, separation: float = 6.0) -> Dataset:
    """Gaussian clusters with unit noise around well-separated centers.

    ``dims`` is a feature count (2-D images) or a ``(C, H, W)`` tuple. Centers
    sit at distance ``separation`` along random orthogonal directions, so the
    classes are linearly separable with high probability. Labels are
    balanced, shuffled, and the whole set is a pure function of ``seed``.
    """
    shape = (dims,) if isinstance(dims, int) else tuple(dims)
    d = int(np.prod(shape))
    rng = keyed_generator(seed, _BLOB_DOMAIN)
    basis = rng.standard_normal((d, max(classes, 1)))
    q, _ = np.linalg.qr(basis) if d >= classes else (basis / np.linalg.norm(basis, axis=0), None)
    centers = separation * q[:, :classes].T
    labels = np.arange(samples) % classes
    rng.shuffle(labels)
    x = centers[labels] + rng.standard_normal((samples, d))
    return Dataset(x.reshape((samples,) + shape), labels, classes, "train", {"source": "synth_blobs", "seed": seed})


def stratified_subset(ds: Dataset, k: int, seed: int = 0) -> Dataset:
    """Pick ``k`` samples with equal per-class counts (remainder to the lowest classes)."""
    if k > len(ds):
        raise ValueError(f"subset of {k} requested from {len(ds)} samples")
    rng = keyed_generator(seed, _SUBSET_DOMAIN)
    classes = np.unique(ds.labels)
    per, extra = divmod(k, len(classes))
    chosen = []
    for j, c in enumerate(classes):
        idx = np.flatnonzero(ds.labels == c)
        take = per + (1 if j < extra else 0)
        if take > idx.size:
            raise ValueError(f"class {c} has only {idx.size} samples, {take} requested")
        chosen.append(rng.choice(idx, size=take, replace=False))
    sel = np.sort(np.concatenate(chosen))
    sub = ds.subset(sel)
    sub.metadata["subset"] = {"k": k, "seed": seed}
    return sub
