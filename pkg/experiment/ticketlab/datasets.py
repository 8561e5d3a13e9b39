"""Desk-scale data: synthetic generators, IDX files, augmentation and batching."""

from dataclasses import dataclass
import gzip
import logging
import math
from pathlib import Path
import struct
from typing import Optional

import numpy as np
from sklearn.datasets import make_blobs
from sklearn.model_selection import train_test_split as sk_train_test_split

from .config import AugmentConfig, DataConfig
from .errors import ConfigurationError, IdxCountMismatchError, IdxMagicError, IdxTruncatedError
from .rng import stream

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# half-width of the hypercube holding the blob centers
CENTER_BOX = 5.0


@dataclass
class Dataset:
    """Inputs (n × input shape), integer labels and the number of classes."""

    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ConfigurationError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigurationError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.inputs.shape[1:])

    def subset(self, indices) -> "Dataset":
        return Dataset(self.inputs[indices], self.labels[indices], self.class_count)


def _balanced_counts(n: int, classes: int) -> list[int]:
    return [n // classes + (1 if c < n % classes else 0) for c in range(classes)]


def blob_centers(classes: int, dim: int) -> np.ndarray:
    """Class centers for `gen_blobs`; they depend only on (classes, dim), not on the sample seed."""
    rng = stream(0, "data", classes, dim)
    return rng.uniform(-CENTER_BOX, CENTER_BOX, size=(classes, dim))


def gen_blobs(n: int, classes: int, dim: int, spread: float, seed: int) -> Dataset:
    """Gaussian clusters of std `spread` around fixed per-class centers, balanced to ±1 sample."""
    if not n >= classes >= 2:
        raise ConfigurationError(f"gen_blobs needs n >= classes >= 2, got n={n}, classes={classes}")
    random_state = int(stream(seed, "data").integers(2**31 - 1))
    inputs, labels = make_blobs(
        n_samples=_balanced_counts(n, classes),
        n_features=dim,
        centers=blob_centers(classes, dim),
        cluster_std=spread,
        shuffle=False,
        random_state=random_state,
    )
    return Dataset(inputs.astype(np.float64), labels.astype(np.int64), classes)


def spiral_point(t: np.ndarray, turns: float, cls: int) -> np.ndarray:
    """Point at parameter t ∈ [0, 1] on the spiral of class `cls` (0 or 1).

    Radius grows linearly with t; class 1 is class 0 rotated by π.
    """
    angle = 2 * math.pi * turns * t + math.pi * cls
    return np.stack([t * np.cos(angle), t * np.sin(angle)], axis=-1)


def gen_spirals(n: int, turns: float, noise: float, seed: int) -> Dataset:
    """Two interleaved spirals with n/2 points each, plus isotropic Gaussian noise."""
    if n < 2 or n % 2:
        raise ConfigurationError(f"gen_spirals needs a positive even n, got {n}")
    rng = stream(seed, "data")
    half = n // 2
    inputs, labels = [], []
    for cls in (0, 1):
        t = np.sort(rng.uniform(0.05, 1.0, size=half))
        points = spiral_point(t, turns, cls)
        if noise > 0:
            points = points + rng.normal(0.0, noise, size=points.shape)
        inputs.append(points)
        labels.append(np.full(half, cls, dtype=np.int64))
    return Dataset(np.concatenate(inputs), np.concatenate(labels), 2)


def _open_idx(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    with _open_idx(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxTruncatedError(path, "file too short for the IDX magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(path, f"magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(raw) < header:
        raise IdxTruncatedError(path, f"header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxTruncatedError(path, f"payload needs {count} bytes, file has {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count: Optional[int] = None) -> Dataset:
    """Read an IDX image/label pair.

    Images become float (n, 1, rows, cols) arrays scaled to [0, 1].

    Raises:
        IdxMagicError, IdxTruncatedError, IdxCountMismatchError: naming the offending file.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if len(images) != len(labels):
        raise IdxCountMismatchError(labels_path, f"{len(labels)} labels for {len(images)} images in {images_path}")
    if len(images) == 0:
        raise IdxTruncatedError(images_path, "no images")
    inputs = (images.astype(np.float64) / 255.0)[:, None, :, :]
    if class_count is None:
        class_count = max(int(labels.max()) + 1, 2)
    logger.info("loaded %d images of shape %s from %s", len(images), images.shape[1:], images_path)
    return Dataset(inputs, labels, class_count)


def save_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def flip_images(batch: np.ndarray, coins: np.ndarray) -> np.ndarray:
    """Mirror the samples whose coin is True along the width axis."""
    out = batch.copy()
    out[coins] = out[coins][..., ::-1]
    return out


def crop_images(batch: np.ndarray, padding: int, offsets: np.ndarray) -> np.ndarray:
    """Crop each sample from a zero-padded canvas at its (row, col) offset in [0, 2·padding]."""
    n, _, h, w = batch.shape
    canvas = np.pad(batch, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.empty_like(batch)
    for i in range(n):
        r, c = offsets[i]
        out[i] = canvas[i, :, r : r + h, c : c + w]
    return out


def augment(batch: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip (p = 0.5) and random crop with zero padding, per sample."""
    if not config.enabled:
        return batch
    if batch.ndim != 4:
        raise ConfigurationError(f"augmentation needs (N, C, H, W) batches, got shape {batch.shape}")
    if config.crop_padding > min(batch.shape[2], batch.shape[3]):
        raise ConfigurationError(
            f"crop_padding {config.crop_padding} exceeds the spatial size {batch.shape[2:]}"
        )
    n = len(batch)
    if config.horizontal_flip:
        batch = flip_images(batch, rng.random(n) < 0.5)
    if config.crop_padding > 0:
        batch = crop_images(batch, config.crop_padding, rng.integers(0, 2 * config.crop_padding + 1, size=(n, 2)))
    return batch


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batches(dataset: Dataset, batch_size: int, epoch_seed: int, epoch: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """A deterministic permutation of the dataset cut into (inputs, labels) batches.

    The last batch may be short.
    """
    rng = stream(epoch_seed, "shuffle", epoch)
    return [(dataset.inputs[idx], dataset.labels[idx]) for idx in batch_indices(len(dataset), batch_size, rng)]


def train_test_split(dataset: Dataset, test_fraction: float = 0.2, seed: int = 2020) -> tuple[Dataset, Dataset]:
    """Stratified held-out split drawn from a dedicated stream.

    Raises:
        ConfigurationError: the data is too small to give every class a place on both sides.
    """
    random_state = int(stream(seed, "split").integers(2**31 - 1))
    try:
        train_idx, test_idx = sk_train_test_split(
            np.arange(len(dataset)),
            test_size=test_fraction,
            random_state=random_state,
            stratify=dataset.labels,
        )
    except ValueError as e:
        raise ConfigurationError(
            f"cannot split {len(dataset)} samples of {dataset.class_count} classes with test_fraction={test_fraction}: {e}"
        ) from e
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(test_idx))


def load_dataset(config: DataConfig) -> tuple[Dataset, Dataset]:
    """Build the (train, test) pair described by `config`."""
    if config.kind == "blobs":
        full = gen_blobs(config.n, config.classes, config.dim, config.spread, config.seed)
    elif config.kind == "spirals":
        full = gen_spirals(config.n, config.turns, config.noise, config.seed)
    elif config.kind == "idx":
        if config.images_path is None or config.labels_path is None:
            raise ConfigurationError("idx data needs images_path and labels_path")
        full = load_idx(config.images_path, config.labels_path)
        if config.test_images_path is not None and config.test_labels_path is not None:
            test = load_idx(config.test_images_path, config.test_labels_path)
            classes = max(full.class_count, test.class_count)
            return Dataset(full.inputs, full.labels, classes), Dataset(test.inputs, test.labels, classes)
    else:
        raise ConfigurationError(f"Unknown dataset kind: {config.kind}.")
    return train_test_split(full, config.test_fraction, config.split_seed)
