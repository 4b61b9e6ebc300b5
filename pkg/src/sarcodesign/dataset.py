"""Synthetic SAR-like image sets and their binary file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"ARDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # N x H x W float32 in [0, 1]
    labels: np.ndarray  # N int64
    classes: int
    split: str = "train"
    seed: int | None = None

    def __post_init__(self):
        if self.images.ndim != 3:
            raise ValueError(f"images must be N x H x W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def side(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    @property
    def x(self) -> np.ndarray:
        """Images as an ``N x 1 x H x W`` batch."""
        return self.images[:, None]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.classes, self.split, self.seed)


def _templates(classes: int, n: int, side: int, rng: np.random.Generator):
    """Oriented bright bars, one orientation per class, with jittered placement."""
    labels = np.repeat(np.arange(classes), n)
    count = labels.size
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    jitter = side / 8.0
    cy = (side - 1) / 2 + rng.uniform(-jitter, jitter, count)
    cx = (side - 1) / 2 + rng.uniform(-jitter, jitter, count)
    theta = np.pi * labels / classes + rng.normal(0.0, 0.05, count)
    amp = rng.uniform(0.55, 0.8, count)
    length = side * np.where(labels % 2 == 0, 0.28, 0.22)
    width = max(side / 14.0, 0.8)
    dy = yy[None] - cy[:, None, None]
    dx = xx[None] - cx[:, None, None]
    along = dx * np.cos(theta)[:, None, None] + dy * np.sin(theta)[:, None, None]
    across = -dx * np.sin(theta)[:, None, None] + dy * np.cos(theta)[:, None, None]
    bar = np.exp(-0.5 * (along / length[:, None, None]) ** 2 - 0.5 * (across / width) ** 2)
    return labels, 0.12 + amp[:, None, None] * bar


def generate_synthetic(classes: int, per_class: int, side: int = 16, seed: int = 0,
                       split: str = "train") -> Dataset:
    """Class templates times unit-mean exponential speckle, clamped to [0, 1]."""
    if classes < 1 or per_class < 0 or side < 1:
        raise ValueError("classes >= 1, per_class >= 0 and side >= 1 are required")
    rng = np.random.default_rng(seed)
    labels, clean = _templates(classes, per_class, side, rng)
    speckle = rng.exponential(1.0, clean.shape)
    images = np.clip(clean * speckle, 0.0, 1.0).astype(np.float32)
    order = rng.permutation(len(labels))
    return Dataset(images[order].reshape(-1, side, side), labels[order].astype(np.int64), classes, split, seed)


def to_bytes(ds: Dataset) -> bytes:
    h, w = ds.side
    body = bytearray(_HEADER.pack(MAGIC, VERSION, len(ds), ds.classes, h, w))
    rec = np.zeros(len(ds), dtype=[("label", "<u4"), ("pix", "<f4", (h * w,))])
    rec["label"] = ds.labels
    rec["pix"] = ds.images.reshape(len(ds), h * w)
    body += rec.tobytes()
    return bytes(body)


def from_bytes(blob: bytes, split: str = "train") -> Dataset:
    magic, version, count, classes, h, w = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ValueError(f"not a dataset file (magic {magic!r})")
    if version != VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    dt = np.dtype([("label", "<u4"), ("pix", "<f4", (h * w,))])
    if len(blob) != _HEADER.size + count * dt.itemsize:
        raise ValueError("dataset file size does not match its header")
    rec = np.frombuffer(blob, dtype=dt, count=count, offset=_HEADER.size)
    images = rec["pix"].reshape(count, h, w).astype(np.float32)
    return Dataset(images, rec["label"].astype(np.int64), classes, split)


def save(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ds))


def load(path, split: str = "train") -> Dataset:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), split)
