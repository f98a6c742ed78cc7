"""CIFAR-10/100 binary ingestion and augmentation.

Record layout: CIFAR-10 is 1 label byte + 3072 pixel bytes (channel-planar
R, G, B, each 32x32 row-major); CIFAR-100 carries coarse + fine label bytes
(the fine label is used).  Images are normalized with per-channel mean/std
computed from the training split.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, FileTruncated, LabelOutOfRange

RECORD_LEN = {10: 3073, 100: 3074}
TRAIN_FILES = {10: [f"data_batch_{i}.bin" for i in range(1, 6)], 100: ["train.bin"]}
TEST_FILES = {10: ["test_batch.bin"], 100: ["test.bin"]}
VAL_SPLIT = 5000


@dataclass
class Dataset:
    images: np.ndarray   # [N, 3, 32, 32] float32, normalized
    labels: np.ndarray   # [N] int64

    def __len__(self) -> int:
        return len(self.labels)


def _read_records(path: Path, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    rec = RECORD_LEN[num_classes]
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if raw.size == 0 or raw.size % rec:
        raise FileTruncated(f"{path}: {raw.size} bytes is not a multiple of {rec}")
    rows = raw.reshape(-1, rec)
    labels = rows[:, 0 if num_classes == 10 else 1].astype(np.int64)
    if labels.max(initial=0) >= num_classes:
        bad = int(labels.max())
        raise LabelOutOfRange(f"{path}: label {bad} >= {num_classes}")
    pixels = rows[:, rec - 3072:].reshape(-1, 3, 32, 32)
    return pixels, labels


def _load_raw(data_dir, files, num_classes):
    pixels, labels = [], []
    for fname in files:
        p, l = _read_records(Path(data_dir) / fname, num_classes)
        pixels.append(p)
        labels.append(l)
    return np.concatenate(pixels), np.concatenate(labels)


def load_cifar(data_dir, split: str, num_classes: int = 10, seed: int = 0,
               val_split: int = VAL_SPLIT) -> Dataset:
    """Load one split ('train', 'val', 'test'), normalized by train statistics.

    The train files are shuffled once with the given seed and the last
    ``val_split`` images become the validation split (45k/5k on full CIFAR;
    smaller files keep at most half for validation).
    """
    if split not in ("train", "val", "test"):
        raise ValueError(f"unknown split {split!r}")
    train_px, train_lb = _load_raw(data_dir, TRAIN_FILES[num_classes], num_classes)
    x64 = train_px.astype(np.float64) / 255.0
    mean = x64.mean(axis=(0, 2, 3))
    std = x64.std(axis=(0, 2, 3))
    std[std == 0] = 1.0

    if split == "test":
        px, lb = _load_raw(data_dir, TEST_FILES[num_classes], num_classes)
    else:
        order = np.random.default_rng(np.uint64(seed)).permutation(len(train_lb))
        n_val = min(val_split, len(order) // 2)
        if split == "train":
            keep = order[:len(order) - n_val]
        else:
            keep = order[len(order) - n_val:]
        px, lb = train_px[keep], train_lb[keep]
    if len(lb) == 0:
        raise EmptyDataset(f"split {split!r} is empty")
    images = ((px.astype(np.float32) / 255.0) - mean.astype(np.float32)[None, :, None, None]) \
        / std.astype(np.float32)[None, :, None, None]
    return Dataset(np.ascontiguousarray(images), lb)


def augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random 32x32 crop from the zero-padded 36x36 image + horizontal flip.

    Draw order per image is fixed (row offset, column offset, flip) so a
    seeded stream reproduces the exact sequence.
    """
    if img.shape != (3, 32, 32):
        raise ValueError(f"augment expects [3,32,32], got {img.shape}")
    padded = np.zeros((3, 36, 36), dtype=img.dtype)
    padded[:, 2:34, 2:34] = img
    r = int(rng.integers(0, 5))
    c = int(rng.integers(0, 5))
    out = padded[:, r:r + 32, c:c + 32]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)
