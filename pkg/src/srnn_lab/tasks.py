"""Sequence tasks: MemCopy, Adding, permuted-pixel MNIST and random-label subsets.

Generators take an explicit ``numpy.random.Generator``; reruns with the same
seed are bit-identical. Batches are time-major: inputs ``(T, B[, d_in])``.
"""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import softmax_cross_entropy

LOSS_KINDS = ("per_step_ce", "final_ce", "final_mse")

# MemCopy alphabet: ids 0..7 are data symbols, 8 is blank, 9 is the delimiter.
MEMCOPY_DATA = 8
MEMCOPY_BLANK = 8
MEMCOPY_DELIM = 9
MEMCOPY_VOCAB = 10
MEMCOPY_CLASSES = 9
MEMCOPY_RECALL = 10

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


@dataclass
class TaskBatch:
    inputs: np.ndarray  # (T, B, d_in) float or (T, B) int token ids
    targets: np.ndarray  # (T, B) ids for per_step_ce, (B,) ids or reals otherwise
    loss_mask: np.ndarray  # (T,) bool
    loss_kind: str

    @property
    def T(self) -> int:
        return self.inputs.shape[0]

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[1]

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.loss_mask.shape != (self.inputs.shape[0],) or not self.loss_mask.any():
            raise ValueError("loss_mask must have length T and at least one true entry")


def gen_memcopy(T: int, batch: int, rng: np.random.Generator) -> TaskBatch:
    """Recall 10 data symbols after a gap of T-1 blanks and a delimiter.

    Sequence length is T + 20 and the loss covers every step.
    """
    if T < 1:
        raise ValueError(f"MemCopy needs T >= 1, got {T}")
    L = T + 2 * MEMCOPY_RECALL
    data = rng.integers(0, MEMCOPY_DATA, size=(MEMCOPY_RECALL, batch))
    inputs = np.full((L, batch), MEMCOPY_BLANK, dtype=np.int64)
    inputs[:MEMCOPY_RECALL] = data
    inputs[T + MEMCOPY_RECALL - 1] = MEMCOPY_DELIM
    targets = np.full((L, batch), MEMCOPY_BLANK, dtype=np.int64)
    targets[T + MEMCOPY_RECALL :] = data
    return TaskBatch(inputs, targets, np.ones(L, dtype=bool), "per_step_ce")


def memcopy_baseline_ce(T: int) -> float:
    """Cross-entropy of the memoryless solution: 10 ln 8 / (T + 20)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    return MEMCOPY_RECALL * math.log(MEMCOPY_DATA) / (T + 2 * MEMCOPY_RECALL)


def gen_adding(T: int, batch: int, rng: np.random.Generator) -> TaskBatch:
    """Sum the two values flagged by the marker channel; one flag per half."""
    if T < 2:
        raise ValueError(f"Adding needs T >= 2, got {T}")
    half = math.ceil(T / 2)
    values = rng.uniform(0.0, 1.0, size=(T, batch))
    first = rng.integers(0, half, size=batch)
    second = rng.integers(half, T, size=batch)
    markers = np.zeros((T, batch))
    cols = np.arange(batch)
    markers[first, cols] = 1.0
    markers[second, cols] = 1.0
    inputs = np.stack([values, markers], axis=-1)
    targets = values[first, cols] + values[second, cols]
    mask = np.zeros(T, dtype=bool)
    mask[-1] = True
    return TaskBatch(inputs, targets, mask, "final_mse")


def adding_baseline_mse() -> float:
    """MSE of always predicting 1 (variance of a sum of two U(0,1) draws, rounded)."""
    return 0.167


def batch_loss(outputs: np.ndarray, batch: TaskBatch) -> tuple[np.floating, np.ndarray]:
    """Loss for ``outputs`` of shape ``(T, B, d_o)`` and its gradient w.r.t. outputs."""
    T, B, d_o = outputs.shape
    grad = np.zeros_like(outputs)
    if batch.loss_kind == "per_step_ce":
        steps = np.flatnonzero(batch.loss_mask)
        logits = outputs[steps].reshape(-1, d_o)
        loss, g = softmax_cross_entropy(logits, batch.targets[steps].reshape(-1))
        grad[steps] = g.reshape(len(steps), B, d_o)
    elif batch.loss_kind == "final_ce":
        loss, grad[-1] = softmax_cross_entropy(outputs[-1], batch.targets)
    else:
        diff = outputs[-1, :, 0] - batch.targets
        loss = np.mean(diff * diff)
        grad[-1, :, 0] = 2.0 * diff / B
    return loss, grad


# --- IDX image files -------------------------------------------------------


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, H, W) uint8
    labels: np.ndarray  # (N,) ints in [0, 10)
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    @property
    def N(self) -> int:
        return len(self.labels)


def _read_maybe_gz(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise IdxError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError(f"{path}: truncated header, expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise IdxError(f"{path}: expected {expected} bytes for dims {dims}, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> ImageDataset:
    """Parse an IDX image/label pair (optionally gzip-compressed)."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    for p in (images_path, labels_path):
        if not p.exists():
            raise IdxError(f"IDX file not found: {p}")
    images = _parse_idx(_read_maybe_gz(images_path), IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_maybe_gz(labels_path), LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise IdxError(f"count mismatch: {len(images)} images in {images_path}, {len(labels)} labels in {labels_path}")
    if labels.size and labels.max() > 9:
        raise IdxError(f"{labels_path}: label {labels.max()} outside [0, 10)")
    return ImageDataset(images.copy(), labels.astype(np.int64), split)


def write_idx(ds: ImageDataset, images_path, labels_path, compress: bool = False) -> None:
    n, h, w = ds.images.shape
    img = struct.pack(">IIII", IMAGES_MAGIC, n, h, w) + np.ascontiguousarray(ds.images, dtype=np.uint8).tobytes()
    lab = struct.pack(">II", LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes()
    if compress:
        img, lab = gzip.compress(img, mtime=0), gzip.compress(lab, mtime=0)
    Path(images_path).write_bytes(img)
    Path(labels_path).write_bytes(lab)


def find_mnist(data_dir, split: str = "train") -> ImageDataset:
    """Load ``{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`` from ``data_dir``."""
    prefix = {"train": "train", "test": "t10k"}[split]
    data_dir = Path(data_dir)

    def pick(stem):
        for name in (stem, stem + ".gz"):
            if (data_dir / name).exists():
                return data_dir / name
        raise IdxError(f"no {stem}[.gz] under {data_dir}")

    return load_idx(pick(f"{prefix}-images-idx3-ubyte"), pick(f"{prefix}-labels-idx1-ubyte"), split)


# --- pixel sequences -------------------------------------------------------


def pixel_permutation(length: int, permute_seed: int) -> np.ndarray:
    """Fixed pixel order; seed 0 is reserved for raster (identity) order."""
    if permute_seed == 0:
        return np.arange(length)
    return np.random.default_rng(permute_seed).permutation(length)


def center_crop(images: np.ndarray, side: int) -> np.ndarray:
    h, w = images.shape[1:]
    if side > min(h, w):
        raise ValueError(f"crop {side} larger than image {h}x{w}")
    top, left = (h - side) // 2, (w - side) // 2
    return images[:, top : top + side, left : left + side]


@dataclass
class PixelTask:
    """Images flattened to pixel sequences under one fixed permutation."""

    sequences: np.ndarray  # (N, L) float64 in [0, 1]
    labels: np.ndarray  # (N,)
    permutation: np.ndarray  # (L,)

    @property
    def T(self) -> int:
        return self.sequences.shape[1]

    @property
    def N(self) -> int:
        return len(self.labels)

    def batch(self, idx) -> TaskBatch:
        idx = np.asarray(idx)
        inputs = self.sequences[idx].T[:, :, None]
        mask = np.zeros(self.T, dtype=bool)
        mask[-1] = True
        return TaskBatch(np.ascontiguousarray(inputs), self.labels[idx], mask, "final_ce")

    def subset(self, idx) -> "PixelTask":
        return PixelTask(self.sequences[idx], self.labels[idx], self.permutation)


def make_pixel_sequences(ds: ImageDataset, crop: int | None = None, permute_seed: int = 0) -> PixelTask:
    if crop not in (None, 0, 8, 16):
        raise ValueError(f"crop must be one of none, 8, 16; got {crop}")
    images = center_crop(ds.images, crop) if crop else ds.images
    flat = images.reshape(len(images), -1)
    perm = pixel_permutation(flat.shape[1], permute_seed)
    return PixelTask(flat[:, perm].astype(np.float64) / 255.0, ds.labels.copy(), perm)


def shuffle_labels_subset(ds: ImageDataset, N: int, seed: int) -> ImageDataset:
    """Keep N samples of a seeded shuffle and replace labels by uniform random classes."""
    if not 0 < N <= ds.N:
        raise ValueError(f"N must be in [1, {ds.N}], got {N}")
    rng = np.random.default_rng(seed)
    keep = rng.permutation(ds.N)[:N]
    labels = rng.integers(0, 10, size=N)
    return ImageDataset(ds.images[keep], labels, split=f"{ds.split}-random-{N}")


def holdout_split(n: int, val_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train_idx, val_idx) partition of range(n)."""
    if not 0 <= val_size < n:
        raise ValueError(f"val_size must be in [0, {n}), got {val_size}")
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[val_size:]), np.sort(order[:val_size])
