"""Dataset generation and ingestion.

Synthetic shape classification keeps every experiment self-contained; IDX and
CIFAR-10 binary readers cover the two on-disk formats. Images travel as
float64 [N, C, H, W] scaled to [0, 1]; training standardizes per channel with
statistics computed on the training split only.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError, FormatError, LengthError, ParameterError

SHAPE_KINDS = ("disk", "square", "triangle", "ring")


@dataclass
class LabeledDataset:
    images: np.ndarray   # [N, C, H, W] float64
    labels: np.ndarray   # [N] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be [N, C, H, W], got {self.images.shape}")
        if self.images.shape[0] == 0:
            raise DatasetError("empty dataset rejected")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetError("one label per image required")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def to_json(self) -> str:
        return json.dumps({"mean": list(self.mean), "std": list(self.std)})

    @staticmethod
    def from_json(text: str) -> "ChannelStats":
        doc = json.loads(text)
        return ChannelStats(mean=tuple(doc["mean"]), std=tuple(doc["std"]))


def standardize(ds: LabeledDataset) -> tuple[LabeledDataset, ChannelStats]:
    """Per-channel zero-mean unit-variance scaling; stats from this split."""
    mean = ds.images.mean(axis=(0, 2, 3))
    std = np.maximum(ds.images.std(axis=(0, 2, 3)), 1e-8)
    stats = ChannelStats(mean=tuple(mean.tolist()), std=tuple(std.tolist()))
    return apply_standardization(ds, stats), stats


def apply_standardization(ds: LabeledDataset, stats: ChannelStats) -> LabeledDataset:
    mean = np.asarray(stats.mean).reshape(1, -1, 1, 1)
    std = np.asarray(stats.std).reshape(1, -1, 1, 1)
    return LabeledDataset(images=(ds.images - mean) / std, labels=ds.labels.copy(),
                          num_classes=ds.num_classes, split=ds.split)


def fingerprint(ds: LabeledDataset) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(ds.images).tobytes())
    digest.update(np.ascontiguousarray(ds.labels).tobytes())
    digest.update(struct.pack("<I", ds.num_classes))
    return digest.hexdigest()


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

def _shape_field(kind: str, size: int, cx: float, cy: float, radius: float,
                 angle: float, supersample: int = 4) -> np.ndarray:
    coords = (np.arange(size * supersample) + 0.5) / supersample
    xs, ys = np.meshgrid(coords, coords, indexing="xy")
    dx, dy = xs - cx, ys - cy
    if kind == "disk":
        inside = dx * dx + dy * dy <= radius * radius
    elif kind == "square":
        u = np.cos(angle) * dx + np.sin(angle) * dy
        v = -np.sin(angle) * dx + np.cos(angle) * dy
        half = radius * 0.82
        inside = (np.abs(u) <= half) & (np.abs(v) <= half)
    elif kind == "triangle":
        r = radius * 1.3
        verts = [(cx + r * np.cos(angle + 2 * np.pi * k / 3),
                  cy + r * np.sin(angle + 2 * np.pi * k / 3)) for k in range(3)]
        inside = np.ones_like(dx, dtype=bool)
        for (x1, y1), (x2, y2) in zip(verts, verts[1:] + verts[:1]):
            cross = (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)
            inside &= cross >= 0
    elif kind == "ring":
        dist2 = dx * dx + dy * dy
        inside = (dist2 <= radius * radius) & (dist2 >= (0.55 * radius) ** 2)
    else:
        raise ParameterError(f"unknown shape kind {kind!r}")
    field = inside.astype(np.float64)
    return field.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def gen_synthetic_shapes(n_per_class: int, size: int, k: int = 4, seed: int = 0,
                         noise: float = 0.1, split: str = "train") -> LabeledDataset:
    """k classes of anti-aliased shapes with jittered pose and Gaussian noise."""
    if size < 16:
        raise ParameterError(f"image size must be at least 16, got {size}")
    if not 2 <= k <= len(SHAPE_KINDS):
        raise ParameterError(f"k must lie in [2, {len(SHAPE_KINDS)}], got {k}")
    if n_per_class < 1:
        raise ParameterError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    images = np.empty((k * n_per_class, 1, size, size))
    labels = np.empty(k * n_per_class, dtype=np.int64)
    row = 0
    for label in range(k):
        kind = SHAPE_KINDS[label]
        for _ in range(n_per_class):
            cx = size * rng.uniform(0.38, 0.62)
            cy = size * rng.uniform(0.38, 0.62)
            radius = size * rng.uniform(0.17, 0.28)
            angle = rng.uniform(0.0, 2.0 * np.pi)
            intensity = rng.uniform(0.60, 1.0)
            field = intensity * _shape_field(kind, size, cx, cy, radius, angle)
            field = field + rng.normal(0.0, noise, size=(size, size))
            images[row, 0] = np.clip(field, 0.0, 1.0)
            labels[row] = label
            row += 1
    return LabeledDataset(images=images, labels=labels, num_classes=k, split=split)


# ---------------------------------------------------------------------------
# binary readers
# ---------------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    """Big-endian IDX of unsigned bytes; pixel values scaled to [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise LengthError(f"IDX header truncated: {len(blob)} bytes")
    if blob[0] != 0 or blob[1] != 0:
        raise FormatError(f"bad IDX magic at offset 0: {blob[:2].hex()}")
    dtype_code, ndim = blob[2], blob[3]
    if dtype_code != 0x08:
        raise FormatError(f"unsupported IDX data type 0x{dtype_code:02x} at offset 2")
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise LengthError("IDX dimension table truncated")
    extents = struct.unpack(f">{ndim}I", blob[4:header_end])
    count = int(np.prod(extents, dtype=np.int64)) if extents else 1
    payload = blob[header_end:]
    if len(payload) != count:
        raise LengthError(f"IDX payload length {len(payload)} does not match extents {extents}")
    data = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return data.reshape(extents)


def write_idx(path, data: np.ndarray) -> None:
    """Inverse of read_idx for unsigned-byte payloads."""
    arr = np.asarray(data)
    if arr.dtype != np.uint8:
        raise ParameterError("write_idx stores unsigned bytes; pass a uint8 array")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


CIFAR_RECORD = 1 + 3 * 32 * 32


def read_cifar10_bin(path, split: str = "train") -> LabeledDataset:
    """CIFAR-10 binary batches: per record one label byte then 3072 pixel bytes
    in R, G, B plane order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) % CIFAR_RECORD != 0:
        raise FormatError(f"file length {len(blob)} is not a multiple of {CIFAR_RECORD}")
    n = len(blob) // CIFAR_RECORD
    if n == 0:
        raise DatasetError("empty dataset rejected")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].astype(np.float64).reshape(n, 3, 32, 32) / 255.0
    return LabeledDataset(images=images, labels=labels, num_classes=10, split=split)


# ---------------------------------------------------------------------------
# batching and augmentation
# ---------------------------------------------------------------------------

def make_epoch_batches(ds: LabeledDataset, batch_size: int,
                       rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """One shuffled pass; the final short batch is kept."""
    if batch_size < 1:
        raise ParameterError(f"batch size must be positive, got {batch_size}")
    order = rng.permutation(len(ds))
    batches = []
    for start in range(0, len(ds), batch_size):
        chunk = order[start:start + batch_size]
        batches.append((ds.images[chunk], ds.labels[chunk]))
    return batches


def augment_batch(images: np.ndarray, rng: np.random.Generator,
                  pad: int = 4, flip_prob: float = 0.5) -> np.ndarray:
    """Per-sample horizontal flip and random crop from a zero-padded canvas."""
    n, _, h, w = images.shape
    out = np.empty_like(images)
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    for i in range(n):
        top = int(rng.integers(0, 2 * pad + 1))
        left = int(rng.integers(0, 2 * pad + 1))
        crop = padded[i, :, top:top + h, left:left + w]
        if rng.random() < flip_prob:
            crop = crop[:, :, ::-1]
        out[i] = crop
    return out
