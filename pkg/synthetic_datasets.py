#!/usr/bin/env python3
"""
Synthetic Datasets
Desk-scale image classification datasets (blobs, stripes, shapes) and the
BNDS binary dataset format used by every training command
"""

import struct
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from bottlenet_errors import DatasetError

logger = logging.getLogger(__name__)

DATASET_MAGIC = b'BNDS'
# magic, count, h, w, c, num_classes
DATASET_HEADER = struct.Struct('<4sIIIII')

DATASET_KINDS = ('blobs', 'stripes', 'shapes')


@dataclass
class Dataset:
    """Labelled u8 images in (count, h, w, c) order"""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8).reshape(-1)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (count, h, w, c), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.images.shape[1:])

    def validate(self):
        """Reject empty datasets and out-of-range labels"""
        if len(self) == 0:
            raise DatasetError("dataset is empty")
        if self.num_classes < 1:
            raise DatasetError(f"num_classes must be >= 1, got {self.num_classes}")
        if int(self.labels.max()) >= self.num_classes:
            raise DatasetError(
                f"label {int(self.labels.max())} out of range for {self.num_classes} classes"
            )

    def subset(self, indices) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)

    def tensor(self, indices=None) -> np.ndarray:
        """Pixels scaled to [0, 1] as float64"""
        images = self.images if indices is None else self.images[np.asarray(indices)]
        return images.astype(np.float64) / 255.0

    def split(self, holdout: float, seed: int) -> Tuple['Dataset', 'Dataset']:
        """Deterministic train / held-out split"""
        self.validate()
        if len(self) < 2:
            raise DatasetError("need at least 2 samples to hold out a test split")
        order = np.random.default_rng(seed).permutation(len(self))
        n_test = min(max(1, int(round(len(self) * holdout))), len(self) - 1)
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))


# ============================================================================
# BNDS FILE FORMAT
# ============================================================================

def write_dataset(dataset: Dataset, path) -> Path:
    """Write a dataset as a BNDS file (little-endian header, interleaved records)"""
    dataset.validate()
    path = Path(path)
    count, h, w, c = dataset.images.shape
    records = np.concatenate(
        [dataset.images.reshape(count, -1), dataset.labels.reshape(count, 1)], axis=1
    )
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            f.write(DATASET_HEADER.pack(DATASET_MAGIC, count, h, w, c, dataset.num_classes))
            f.write(records.tobytes())
    except OSError as e:
        raise DatasetError(f"cannot write dataset to {path}: {e}") from e
    logger.info(f"[DATASET] Wrote {count} samples ({h}x{w}x{c}, {dataset.num_classes} classes) to {path}")
    return path


def read_dataset(path) -> Dataset:
    """Read a BNDS file"""
    path = Path(path)
    with open(path, 'rb') as f:
        blob = f.read()

    if len(blob) < DATASET_HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, count, h, w, c, num_classes = DATASET_HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")

    record = h * w * c + 1
    expected = DATASET_HEADER.size + count * record
    if len(blob) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, found {len(blob)}")

    records = np.frombuffer(blob, dtype=np.uint8, offset=DATASET_HEADER.size).reshape(count, record)
    dataset = Dataset(records[:, :-1].reshape(count, h, w, c), records[:, -1], num_classes)
    dataset.validate()
    return dataset


# ============================================================================
# GENERATORS
# ============================================================================

def _balanced_labels(count: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(count) % num_classes
    return rng.permutation(labels)


def _blobs(labels, dims, num_classes, rng) -> np.ndarray:
    h, w, c = dims
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # one bump position per class, on a ring around the image center
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    centers = np.stack([h / 2 + 0.3 * h * np.sin(angles), w / 2 + 0.3 * w * np.cos(angles)], axis=1)
    sigma = max(h, w) / 7.0
    tints = rng.uniform(0.6, 1.0, size=(num_classes, c))

    images = np.empty((len(labels), h, w, c))
    for i, label in enumerate(labels):
        cy, cx = centers[label] + rng.normal(0.0, 0.04 * max(h, w), size=2)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        images[i] = 40.0 + 170.0 * bump[..., None] * tints[label]
    return images + rng.normal(0.0, 12.0, size=images.shape)


def _stripes(labels, dims, num_classes, rng) -> np.ndarray:
    h, w, c = dims
    if num_classes > w // 2 - 1:
        raise DatasetError(f"stripes supports at most {w // 2 - 1} classes at width {w}")
    xx = np.arange(w, dtype=np.float64)
    images = np.empty((len(labels), h, w, c))
    for i, label in enumerate(labels):
        # class k completes k + 1 cycles across the width
        phase = rng.uniform(0.0, 2 * np.pi)
        wave = np.cos(2 * np.pi * (label + 1) * xx / w + phase)
        images[i] = 128.0 + 80.0 * wave[None, :, None]
    return images + rng.normal(0.0, 20.0, size=images.shape)


def _shapes(labels, dims, num_classes, rng) -> np.ndarray:
    h, w, c = dims
    if num_classes > 4:
        raise DatasetError("shapes supports at most 4 classes (square, disk, cross, bar)")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    images = np.empty((len(labels), h, w, c))
    for i, label in enumerate(labels):
        r = rng.uniform(0.18, 0.28) * min(h, w)
        cy = rng.uniform(r, h - r)
        cx = rng.uniform(r, w - r)
        dy, dx = np.abs(yy - cy), np.abs(xx - cx)
        if label == 0:
            mask = (dy <= r) & (dx <= r)
        elif label == 1:
            mask = dy ** 2 + dx ** 2 <= r ** 2
        elif label == 2:
            mask = ((dy <= r / 3) & (dx <= r)) | ((dx <= r / 3) & (dy <= r))
        else:
            mask = (dy <= r / 4) & (dx <= 1.5 * r)
        images[i] = 30.0 + 190.0 * mask[..., None]
    return images + rng.normal(0.0, 15.0, size=images.shape)


GENERATORS: Dict[str, Callable] = {
    'blobs': _blobs,
    'stripes': _stripes,
    'shapes': _shapes,
}


def make_dataset(kind: str, count: int, dims: Tuple[int, int, int], num_classes: int,
                 seed: int) -> Dataset:
    """
    Generate a synthetic dataset deterministically from a seed.

    Args:
        kind: one of blobs, stripes, shapes
        count: number of samples (every class is represented)
        dims: (h, w, c)
        num_classes: number of classes, >= 2
        seed: generator seed
    """
    if kind not in GENERATORS:
        raise DatasetError(f"unknown dataset kind {kind!r}; choose from {', '.join(DATASET_KINDS)}")
    if num_classes < 2 or count < num_classes:
        raise DatasetError(f"need count >= num_classes >= 2, got count={count}, num_classes={num_classes}")
    h, w, c = (int(d) for d in dims)
    if min(h, w, c) < 1:
        raise DatasetError(f"invalid dims {dims}")

    rng = np.random.default_rng(seed)
    labels = _balanced_labels(count, num_classes, rng)
    pixels = GENERATORS[kind](labels, (h, w, c), num_classes, rng)
    images = np.clip(np.floor(pixels + 0.5), 0, 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.uint8), num_classes)


# ============================================================================
# CROPPING
# ============================================================================

def random_crop(batch: np.ndarray, size: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Crop a (B, h, w, c) batch to size at per-sample random offsets"""
    ch, cw = size
    b, h, w, _ = batch.shape
    if ch > h or cw > w:
        raise DatasetError(f"crop {size} larger than images {(h, w)}")
    tops = rng.integers(0, h - ch + 1, size=b)
    lefts = rng.integers(0, w - cw + 1, size=b)
    return np.stack([batch[i, t:t + ch, l:l + cw] for i, (t, l) in enumerate(zip(tops, lefts))])


def center_crop(batch: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    ch, cw = size
    _, h, w, _ = batch.shape
    if ch > h or cw > w:
        raise DatasetError(f"crop {size} larger than images {(h, w)}")
    top, left = (h - ch) // 2, (w - cw) // 2
    return batch[:, top:top + ch, left:left + cw]


def stripe_frequency_classifier(dataset: Dataset) -> np.ndarray:
    """Hand-coded classifier for the stripes dataset: dominant horizontal frequency - 1"""
    profile = dataset.images.astype(np.float64).mean(axis=(1, 3))
    spectrum = np.abs(np.fft.rfft(profile - profile.mean(axis=1, keepdims=True), axis=1))
    return np.argmax(spectrum[:, 1:], axis=1)


def main():
    """Generate a dataset file"""
    import argparse

    parser = argparse.ArgumentParser(description='Generate a synthetic BNDS dataset')
    parser.add_argument('kind', choices=DATASET_KINDS)
    parser.add_argument('--count', type=int, default=600)
    parser.add_argument('--dims', type=int, nargs=3, default=[28, 28, 1], metavar=('H', 'W', 'C'))
    parser.add_argument('--classes', type=int, default=4)
    parser.add_argument('--seed', type=int, default=7)
    parser.add_argument('--out', required=True)
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO)
    dataset = make_dataset(args.kind, args.count, tuple(args.dims), args.classes, args.seed)
    write_dataset(dataset, args.out)
    print(f"✓ {args.kind} dataset written to {args.out}")


if __name__ == "__main__":
    main()
