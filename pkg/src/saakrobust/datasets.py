"""Image set containers and loaders (MNIST IDX, CIFAR-10 binary, synthetic).

Images are held as float64 arrays of shape (N, H, W, C) with values in [0, 1].
A single image is an (H, W, C) array; there is no wrapper class for it.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# IDX type codes used by the generic container
_IDX_DTYPES = {0x08: np.dtype(">u1"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
_IDX_CODES = {np.dtype(np.uint8): 0x08, np.dtype(np.float32): 0x0D, np.dtype(np.float64): 0x0E}

CIFAR_RECORD = 3073


class DatasetFormatError(ValueError):
    """A data file does not have the expected binary layout."""


class DatasetConsistencyError(ValueError):
    """Image and label files disagree."""


class StratificationError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledSet:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError(
                f"{images.shape[0]} images but labels have shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "LabeledSet":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledSet(self.images[indices], self.labels[indices], self.num_classes)

    def with_images(self, images: np.ndarray) -> "LabeledSet":
        """Same labels, new pixels (used by attacks and defenses)."""
        return LabeledSet(images, self.labels, self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def pad_images(images: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad (N, H, W, C) images symmetrically to size x size."""
    _, h, w, _ = images.shape
    if h > size or w > size:
        raise ValueError(f"cannot pad {h}x{w} images down to {size}x{size}")
    top, left = (size - h) // 2, (size - w) // 2
    return np.pad(images, ((0, 0), (top, size - h - top), (left, size - w - left), (0, 0)))


def _read_header(data: bytes, path, expected_magic: int) -> tuple[int, ...]:
    if len(data) < 4:
        raise DatasetFormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise DatasetFormatError(
            f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    rank = expected_magic & 0xFF
    if len(data) < 4 + 4 * rank:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    return struct.unpack(f">{rank}I", data[4:4 + 4 * rank])


def load_idx(image_path, label_path, num_classes: int = 10, pad_to: int | None = 32) -> LabeledSet:
    """Read an MNIST-style pair of IDX files (u8 rank-3 images, u8 rank-1 labels).

    Pixel bytes are divided by 255. With ``pad_to`` set, images are zero-padded
    symmetrically (MNIST 28x28 becomes 32x32 by default); pass ``pad_to=None``
    to keep the stored size.
    """
    image_bytes = Path(image_path).read_bytes()
    label_bytes = Path(label_path).read_bytes()
    n, rows, cols = _read_header(image_bytes, image_path, IDX_IMAGES_MAGIC)
    (n_labels,) = _read_header(label_bytes, label_path, IDX_LABELS_MAGIC)
    if n != n_labels:
        raise DatasetConsistencyError(
            f"{image_path} has {n} images but {label_path} has {n_labels} labels")
    if len(image_bytes) != 16 + n * rows * cols:
        raise DatasetFormatError(f"{image_path}: payload size does not match header")
    if len(label_bytes) != 8 + n:
        raise DatasetFormatError(f"{label_path}: payload size does not match header")

    pixels = np.frombuffer(image_bytes, dtype=np.uint8, offset=16).reshape(n, rows, cols, 1)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, offset=8)
    images = pixels / 255.0
    if pad_to is not None:
        images = pad_images(images, pad_to)
    return LabeledSet(images, labels, num_classes)


def write_idx(dataset: LabeledSet, image_path, label_path) -> None:
    """Write a single-channel set as an MNIST-style IDX pair (u8 pixels)."""
    if dataset.shape[2] != 1:
        raise ValueError("IDX rank-3 image files hold single-channel images only")
    n, h, w, _ = dataset.images.shape
    pixels = np.rint(dataset.images[..., 0] * 255.0).astype(np.uint8)
    Path(image_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    Path(label_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


def write_idx_array(path, array: np.ndarray) -> None:
    """Write an array of any rank as an IDX file (u8, float32 or float64 payload)."""
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype)
    if code is None:
        raise ValueError(f"unsupported IDX dtype {array.dtype}")
    header = struct.pack(">I", (code << 8) | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(_IDX_DTYPES[code]).tobytes())


def read_idx_array(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] not in _IDX_DTYPES:
        raise DatasetFormatError(f"{path}: not an IDX file")
    dtype, rank = _IDX_DTYPES[data[2]], data[3]
    shape = struct.unpack(f">{rank}I", data[4:4 + 4 * rank])
    offset = 4 + 4 * rank
    if len(data) - offset != dtype.itemsize * math.prod(shape):
        raise DatasetFormatError(f"{path}: payload size does not match header")
    return np.frombuffer(data, dtype=dtype, offset=offset).reshape(shape).astype(dtype.newbyteorder("="))


def save_set(dataset: LabeledSet, stem) -> tuple[Path, Path]:
    """Store a set losslessly as ``<stem>-images.idx`` (float64, rank 4) and
    ``<stem>-labels.idx``. Used for attacked and defended sets."""
    stem = Path(stem)
    image_path = stem.with_name(stem.name + "-images.idx")
    label_path = stem.with_name(stem.name + "-labels.idx")
    write_idx_array(image_path, dataset.images)
    write_idx_array(label_path, dataset.labels.astype(np.uint8))
    return image_path, label_path


def load_set(stem, num_classes: int = 10) -> LabeledSet:
    stem = Path(stem)
    images = read_idx_array(stem.with_name(stem.name + "-images.idx"))
    labels = read_idx_array(stem.with_name(stem.name + "-labels.idx"))
    if images.ndim != 4:
        raise DatasetFormatError(f"{stem}: expected rank-4 image array, got rank {images.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise DatasetConsistencyError(f"{stem}: {images.shape[0]} images vs {labels.shape[0]} labels")
    return LabeledSet(images.astype(np.float64), labels, num_classes)


def load_cifar10(batch_paths) -> LabeledSet:
    """Read CIFAR-10 binary batches (1 label byte + 3072 channel-planar pixel bytes)."""
    images, labels = [], []
    for path in batch_paths:
        data = Path(path).read_bytes()
        if len(data) == 0 or len(data) % CIFAR_RECORD:
            raise DatasetFormatError(
                f"{path}: length {len(data)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(records[:, 0])
        planar = records[:, 1:].reshape(-1, 3, 32, 32)
        images.append(planar.transpose(0, 2, 3, 1) / 255.0)
    if not images:
        raise ValueError("no CIFAR-10 batch files given")
    return LabeledSet(np.concatenate(images), np.concatenate(labels), 10)


def synth_blobs(n_per_class: int, num_classes: int, side: int, seed: int,
                channels: int = 1, noise: float = 0.1) -> LabeledSet:
    """Synthetic classes: one random two-level template per class plus uniform noise.

    Template pixels take the values 0.2 or 0.8, so with noise amplitude below 0.3
    every sample is nearer its own template than any other in each coordinate
    where templates differ, which makes the classes linearly separable.
    """
    if side < 4:
        raise ValueError("side must be at least 4")
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    templates = set()
    ordered = []
    while len(ordered) < num_classes:
        t = rng.integers(0, 2, size=(side, side, channels), dtype=np.int8)
        key = t.tobytes()
        if key not in templates:
            templates.add(key)
            ordered.append(0.2 + 0.6 * t)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    base = np.stack(ordered)[labels]
    images = np.clip(base + rng.uniform(-noise, noise, size=base.shape), 0.0, 1.0)
    return LabeledSet(images, labels, num_classes)


def split(dataset: LabeledSet, train_fraction: float, seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Stratified split: ceil(fraction * N_c) of each class goes to the first half.

    Both halves keep the original sample order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if members.size == 0:
            continue
        if members.size < 2:
            raise StratificationError(f"class {c} has fewer than 2 samples")
        members = rng.permutation(members)
        # guard against 0.7 * 10 = 7.000000000000001
        k = math.ceil(round(train_fraction * members.size, 9))
        train_idx.append(members[:k])
        test_idx.append(members[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return dataset.subset(train_idx), dataset.subset(test_idx)
