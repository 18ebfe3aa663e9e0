"""Synthetic two-class toy data, MNIST IDX loading and deterministic batching."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, FormatError
from .rng import generator

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
UNBOUNDED = (-math.inf, math.inf)


@dataclass(frozen=True)
class SyntheticSpec:
    """Class 0 ~ N(0, var I); class 1 ~ N(M, var I), M uniform on a circle."""

    n_per_class: int = 2500
    variance: float = 0.01
    radius: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be positive")
        if not self.variance > 0:
            raise ValueError("variance must be positive")
        if not self.radius > 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True, eq=False)
class LabeledSet:
    inputs: np.ndarray
    labels: np.ndarray
    input_range: tuple = UNBOUNDED

    def __post_init__(self):
        inputs = np.asarray(self.inputs)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.shape[0] != labels.shape[0]:
            raise ConsistencyError(f"{inputs.shape[0]} inputs but {labels.shape[0]} labels")
        lo, hi = self.input_range
        if inputs.size and (inputs.min() < lo or inputs.max() > hi):
            raise ValueError(f"inputs fall outside {self.input_range}")
        for arr in (inputs, labels):
            arr.flags.writeable = False
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, index):
        index = np.asarray(index)
        return LabeledSet(self.inputs[index], self.labels[index], self.input_range)

    def head(self, n):
        return LabeledSet(self.inputs[:n], self.labels[:n], self.input_range)

    def astype(self, dtype):
        return LabeledSet(self.inputs.astype(dtype), self.labels, self.input_range)


def gen_synthetic(spec: SyntheticSpec) -> LabeledSet:
    """Class-0 samples first, then class 1; a pure function of ``spec``."""
    rng = generator(spec.seed, "synthetic")
    n, sd = spec.n_per_class, math.sqrt(spec.variance)
    class0 = rng.standard_normal((n, 2)) * sd
    phi = rng.uniform(0.0, 2.0 * math.pi, size=n)
    centers = spec.radius * np.stack([np.cos(phi), np.sin(phi)], axis=1)
    class1 = centers + rng.standard_normal((n, 2)) * sd
    inputs = np.concatenate([class0, class1]).astype(np.float32)
    labels = np.repeat(np.arange(2), n)
    return LabeledSet(inputs, labels, UNBOUNDED)


def write_synthetic_csv(data: LabeledSet, path):
    """Columns ``x0, x1, label``; values written with full float32 precision."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x0", "x1", "label"])
        for (x0, x1), label in zip(data.inputs.tolist(), data.labels.tolist()):
            writer.writerow([repr(x0), repr(x1), label])


def read_synthetic_csv(path) -> LabeledSet:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    inputs = np.array([[float(r["x0"]), float(r["x1"])] for r in rows], dtype=np.float32)
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    return LabeledSet(inputs.reshape(-1, 2), labels, UNBOUNDED)


def _read_exact(f, count, what):
    data = f.read(count)
    if len(data) != count:
        raise OSError(f"truncated IDX file: {what} needs {count} bytes, got {len(data)}")
    return data


def load_mnist_idx(images_path, labels_path) -> LabeledSet:
    """Parse raw (uncompressed) IDX image and label files.

    Images become float32 ``(N, 1, rows, cols)`` scaled by 1/255.
    """
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IMAGES_MAGIC:
            raise FormatError(f"image file magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")
        pixels = _read_exact(f, count * rows * cols, "pixels")
    with open(labels_path, "rb") as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != LABELS_MAGIC:
            raise FormatError(f"label file magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")
        if n_labels != count:
            raise ConsistencyError(f"{count} images but {n_labels} labels")
        labels = np.frombuffer(_read_exact(f, n_labels, "labels"), dtype=np.uint8)
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(count, 1, rows, cols)
    return LabeledSet(images.astype(np.float32) / np.float32(255.0), labels.astype(np.int64), (0.0, 1.0))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write uint8 ``(N, rows, cols)`` images and labels as raw IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def open_mnist(images_path, labels_path, cache_dir=None) -> LabeledSet:
    """Load IDX files, decompressing ``.gz`` inputs to ``cache_dir`` first."""
    paths = []
    for p in (Path(images_path), Path(labels_path)):
        if p.suffix == ".gz":
            target_dir = Path(cache_dir) if cache_dir else p.parent
            target_dir.mkdir(parents=True, exist_ok=True)
            target = target_dir / p.stem
            raw = gzip.decompress(p.read_bytes())
            if not target.exists() or target.read_bytes() != raw:
                target.write_bytes(raw)
            p = target
        paths.append(p)
    return load_mnist_idx(*paths)


def batches(data: LabeledSet, batch_size: int, seed=None):
    """Yield batches in a seeded random order; the last batch may be short.

    ``seed=None`` keeps the stored order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(data)
    order = np.arange(n) if seed is None else generator(seed, "batches").permutation(n)
    for start in range(0, n, batch_size):
        yield data.subset(order[start : start + batch_size])
