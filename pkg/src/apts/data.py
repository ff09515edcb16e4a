"""Dataset ingestion and mini-batch construction.

Supports the classic big-endian IDX image/label files, a few small synthetic
2-D sets for fixtures, a deterministic image-like stand-in at digit-dataset
shape, and overlapping mini-batch plans: the sample set is cut into disjoint
cores and every batch augments its core with a fixed fraction sampled from
each other core.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .model import Batch

__all__ = [
    "DataError",
    "IdxFormatError",
    "Dataset",
    "BatchPlan",
    "load_idx",
    "make_batches",
    "make_synthetic",
    "make_image_blobs",
]

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049


class DataError(ValueError):
    """Invalid dataset or batching request."""


class IdxFormatError(DataError):
    """Malformed IDX file."""


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (rows are samples), class indices, and a label."""

    inputs: np.ndarray
    targets: np.ndarray
    name: str
    class_count: int

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.targets.shape != (self.inputs.shape[0],):
            raise DataError("inputs/targets shapes are inconsistent")
        if self.targets.size and int(self.targets.max()) >= self.class_count:
            raise DataError("class index outside declared class count")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def batch(self, indices=None) -> Batch:
        """Materialize a batch; all samples when ``indices`` is None."""
        if indices is None:
            return Batch(self.inputs, self.targets)
        idx = np.asarray(indices, dtype=np.intp)
        return Batch(self.inputs[idx], self.targets[idx])

    def subset(self, count: int, *, offset: int = 0, name: str = "") -> "Dataset":
        if offset + count > len(self):
            raise DataError(f"subset [{offset}, {offset + count}) exceeds {len(self)} samples")
        return Dataset(
            self.inputs[offset : offset + count],
            self.targets[offset : offset + count],
            name or f"{self.name}[{offset}:{offset + count}]",
            self.class_count,
        )


def _read_idx(path: Path, expected_magic: int, expected_dims: int) -> np.ndarray:
    raw = path.read_bytes()
    header = 4 * (1 + expected_dims)
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic {magic}, expected {expected_magic}")
    dims = struct.unpack(f">{expected_dims}i", raw[4:header])
    count = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) != count:
        raise IdxFormatError(
            f"{path}: payload has {len(payload)} bytes, header promises {count}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, *, name: str = "") -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1]."""
    images_path = Path(images_path)
    labels_path = Path(labels_path)
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    inputs = images.reshape(images.shape[0], -1).astype(float) / 255.0
    targets = labels.astype(np.int64)
    classes = int(targets.max()) + 1 if targets.size else 1
    return Dataset(inputs, targets, name or images_path.stem, classes)


@dataclass(frozen=True)
class BatchPlan:
    """Assignment of sample indices to (possibly overlapping) mini-batches.

    ``cores`` partition the dataset; ``index_lists[i]`` is core i plus, for
    every other batch j, floor(overlap_fraction * nominal_core) indices
    sampled without replacement from core j.
    """

    batch_count: int
    overlap_fraction: float
    seed: int
    index_lists: Tuple[np.ndarray, ...]
    cores: Tuple[np.ndarray, ...]

    def __iter__(self):
        return iter(self.index_lists)


def make_batches(
    dataset: Dataset, batch_count: int, overlap_fraction: float, seed: int
) -> BatchPlan:
    """Build the overlapping mini-batch plan for a dataset.

    Samples are shuffled once (seeded) and dealt into ``batch_count``
    disjoint cores of floor(p / batch_count) samples, any remainder joining
    the last core.  Each batch then borrows floor(overlap_fraction * core)
    samples from every other core.  Fully deterministic given the seed.
    """
    p = len(dataset)
    if batch_count < 1 or batch_count > p:
        raise DataError(f"batch_count {batch_count} out of range for {p} samples")
    if not 0.0 <= overlap_fraction < 1.0:
        raise DataError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(p)
    nominal = p // batch_count
    cores: List[np.ndarray] = [
        perm[i * nominal : (i + 1) * nominal] for i in range(batch_count - 1)
    ]
    cores.append(perm[(batch_count - 1) * nominal :])
    borrow = int(overlap_fraction * nominal)
    if borrow > min(len(c) for c in cores):
        raise DataError("overlap demand exceeds a core's size")
    index_lists: List[np.ndarray] = []
    for i in range(batch_count):
        parts = [cores[i]]
        for j in range(batch_count):
            if j == i or borrow == 0:
                continue
            parts.append(rng.choice(cores[j], size=borrow, replace=False))
        index_lists.append(np.concatenate(parts))
    return BatchPlan(
        batch_count,
        float(overlap_fraction),
        int(seed),
        tuple(index_lists),
        tuple(cores),
    )


def make_synthetic(kind: str, p: int, seed: int, *, noise: float = 0.1) -> Dataset:
    """Small 2-D fixture datasets: ``two_gaussians``, ``xor`` or ``spiral``."""
    if p < 1:
        raise DataError("p must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "two_gaussians":
        half = p // 2
        counts = [half, p - half]
        means = [(-2.0, 0.0), (2.0, 0.0)]
        xs, ys = [], []
        for cls, (count, mean) in enumerate(zip(counts, means)):
            xs.append(rng.normal(mean, 0.5, size=(count, 2)))
            ys.append(np.full(count, cls, dtype=np.int64))
        inputs = np.concatenate(xs)
        targets = np.concatenate(ys)
    elif kind == "xor":
        corners = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        labels = np.array([0, 1, 1, 0], dtype=np.int64)
        reps = np.arange(p) % 4
        inputs = corners[reps] + rng.normal(0.0, noise, size=(p, 2))
        targets = labels[reps]
    elif kind == "spiral":
        max_radius = 1.0
        arm = np.arange(p) % 2
        t = rng.uniform(0.05, 1.0, size=p)
        angle = t * 3.0 * np.pi + arm * np.pi + rng.normal(0.0, noise, size=p)
        radius = max_radius * t
        inputs = np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])
        targets = arm.astype(np.int64)
    else:
        raise DataError(f"unknown synthetic kind {kind!r}")
    order = rng.permutation(p)
    return Dataset(inputs[order], targets[order], f"{kind}(p={p})", int(targets.max()) + 1)


def _smooth(image: np.ndarray, passes: int = 2) -> np.ndarray:
    # Cheap separable 3x3 box blur to correlate neighbouring pixels.
    out = image
    for _ in range(passes):
        out = (out + np.roll(out, 1, axis=0) + np.roll(out, -1, axis=0)) / 3.0
        out = (out + np.roll(out, 1, axis=1) + np.roll(out, -1, axis=1)) / 3.0
    return out


def make_image_blobs(
    p: int,
    seed: int,
    *,
    class_count: int = 10,
    side: int = 28,
    modes_per_class: int = 3,
    noise: float = 0.35,
) -> Dataset:
    """Deterministic image-classification stand-in at digit-dataset shape.

    Each class owns a few smoothed random prototype images; a sample is a
    prototype plus pixel noise, clipped back to [0, 1].  Classes are balanced
    up to remainder and the sample order is shuffled.
    """
    if p < 1:
        raise DataError("p must be >= 1")
    rng = np.random.default_rng(seed)
    prototypes = np.empty((class_count, modes_per_class, side * side))
    for cls in range(class_count):
        for mode in range(modes_per_class):
            img = _smooth(rng.uniform(0.0, 1.0, size=(side, side)))
            img = (img - img.min()) / max(img.max() - img.min(), 1e-12)
            prototypes[cls, mode] = img.ravel()
    targets = (np.arange(p) % class_count).astype(np.int64)
    modes = rng.integers(0, modes_per_class, size=p)
    inputs = prototypes[targets, modes] + rng.normal(0.0, noise, size=(p, side * side))
    np.clip(inputs, 0.0, 1.0, out=inputs)
    order = rng.permutation(p)
    return Dataset(
        inputs[order], targets[order], f"image_blobs(p={p})", class_count
    )
