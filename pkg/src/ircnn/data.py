"""Dataset ingestion and batching: big-endian IDX and CIFAR binary parsing,
per-channel standardization, seeded train/validation splits, and the
shuffle/flip batch stream.

Loaders are bit-exact: pixel bytes are scaled by 1/255 into float32, so the
decoded buffer (and any checksum of it) is identical across platforms.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .ops import flip_horizontal

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801

MNIST_FILES = {"train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
               "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}
CIFAR10_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST = ["test_batch.bin"]
CIFAR100_TRAIN = ["train.bin"]
CIFAR100_TEST = ["test.bin"]


@dataclass
class Dataset:
    images: np.ndarray            # (N, C, H, W) float32
    labels: np.ndarray            # (N,) int64
    name: str
    num_classes: int
    channel_mean: np.ndarray | None = None
    channel_std: np.ndarray | None = None

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.name}: {self.images.shape[0]} images but "
                            f"{self.labels.shape[0]} labels")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise DataError(f"{self.name}: label {int(self.labels.max())} out of range "
                            f"for {self.num_classes} classes")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])


@dataclass(frozen=True)
class AugmentConfig:
    horizontal_flip: bool = False


def _read_exact(path: Path) -> bytes:
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    return path.read_bytes()


def load_mnist_idx(image_path: str | Path, label_path: str | Path,
                   name: str = "mnist") -> Dataset:
    """Parse a big-endian IDX image/label file pair into a (N,1,H,W) dataset."""
    img_bytes = _read_exact(Path(image_path))
    lbl_bytes = _read_exact(Path(label_path))

    if len(img_bytes) < 16:
        raise DataError(f"{image_path}: truncated IDX header")
    magic, n, h, w = struct.unpack(">IIII", img_bytes[:16])
    if magic != IDX_MAGIC_IMAGES:
        raise DataError(f"{image_path}: bad IDX magic 0x{magic:08x}, expected "
                        f"0x{IDX_MAGIC_IMAGES:08x}")
    if len(img_bytes) != 16 + n * h * w:
        raise DataError(f"{image_path}: truncated IDX payload: header declares "
                        f"{n}x{h}x{w} but file holds {len(img_bytes) - 16} bytes")

    if len(lbl_bytes) < 8:
        raise DataError(f"{label_path}: truncated IDX header")
    lmagic, ln = struct.unpack(">II", lbl_bytes[:8])
    if lmagic != IDX_MAGIC_LABELS:
        raise DataError(f"{label_path}: bad IDX magic 0x{lmagic:08x}, expected "
                        f"0x{IDX_MAGIC_LABELS:08x}")
    if len(lbl_bytes) != 8 + ln:
        raise DataError(f"{label_path}: truncated IDX payload")
    if ln != n:
        raise DataError(f"IDX pair mismatch: {n} images vs {ln} labels")

    pixels = np.frombuffer(img_bytes, dtype=np.uint8, offset=16)
    images = (pixels.astype(np.float32) / 255.0).reshape(n, 1, h, w)
    labels = np.frombuffer(lbl_bytes, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images, labels, name=name, num_classes=10)


def load_cifar_bin(paths: list[str | Path], variant: str) -> Dataset:
    """Parse CIFAR binary batches.

    cifar10 records: 1 label byte + 3072 pixel bytes (R, G, B planes).
    cifar100 records: 1 coarse + 1 fine label byte + 3072 pixel bytes; the
    fine label is kept.
    """
    if variant not in ("cifar10", "cifar100"):
        raise ConfigError(f"cifar variant must be 'cifar10' or 'cifar100', got {variant!r}")
    record = 3073 if variant == "cifar10" else 3074
    classes = 10 if variant == "cifar10" else 100
    all_images, all_labels = [], []
    for p in paths:
        raw = _read_exact(Path(p))
        if len(raw) == 0 or len(raw) % record != 0:
            raise DataError(f"{p}: file length {len(raw)} is not a multiple of the "
                            f"{record}-byte {variant} record size")
        rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labels = rows[:, 0] if variant == "cifar10" else rows[:, 1]
        pixels = rows[:, record - 3072:]
        all_images.append(pixels)
        all_labels.append(labels)
    pixels = np.concatenate(all_images)
    images = (pixels.astype(np.float32) / 255.0).reshape(-1, 3, 32, 32)
    labels = np.concatenate(all_labels).astype(np.int64)
    return Dataset(images, labels, name=variant, num_classes=classes)


def load_dataset(name: str, data_dir: str | Path, split: str) -> Dataset:
    """Load a named dataset split from its canonical files under data_dir."""
    d = Path(data_dir)
    if name == "mnist":
        img, lbl = MNIST_FILES[split]
        return load_mnist_idx(d / img, d / lbl)
    if name == "cifar10":
        files = CIFAR10_TRAIN if split == "train" else CIFAR10_TEST
        return load_cifar_bin([d / f for f in files], "cifar10")
    if name == "cifar100":
        files = CIFAR100_TRAIN if split == "train" else CIFAR100_TEST
        return load_cifar_bin([d / f for f in files], "cifar100")
    raise ConfigError(f"unknown dataset {name!r}")


def normalize(ds: Dataset, mean: np.ndarray | None = None,
              std: np.ndarray | None = None) -> Dataset:
    """Per-channel standardization. Without given statistics they are computed
    from *ds* itself (do that on the training split, then pass the stored
    statistics when normalizing evaluation splits)."""
    if mean is None:
        mean = ds.images.mean(axis=(0, 2, 3), dtype=np.float64)
        std = ds.images.std(axis=(0, 2, 3), dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.maximum(np.asarray(std, dtype=np.float64), 1e-8)
    images = ((ds.images - mean[:, None, None]) / std[:, None, None]).astype(np.float32)
    return replace(ds, images=images, channel_mean=mean, channel_std=std)


def split_train_val(ds: Dataset, holdout_fraction: float, seed: int
                    ) -> tuple[Dataset, Dataset]:
    """Deterministic holdout split of a training set (seeded permutation)."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError(f"holdout fraction must be in (0, 1), got {holdout_fraction}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.n)
    n_val = max(1, int(round(ds.n * holdout_fraction)))
    return ds.subset(np.sort(perm[n_val:])), ds.subset(np.sort(perm[:n_val]))


def batch_iter(ds: Dataset, batch_size: int, mode: str,
               rng: np.random.Generator | None = None,
               augment: AugmentConfig = AugmentConfig()):
    """Yield (images, labels) batches for one epoch.

    Train mode reshuffles from *rng* and flips each sample left-right with
    probability 0.5 when flip augmentation is on. Eval mode is unshuffled and
    unaugmented and covers every sample exactly once, final partial batch
    included.
    """
    if batch_size < 1 or batch_size > ds.n:
        raise ConfigError(f"batch size {batch_size} invalid for dataset of {ds.n}")
    if mode == "train":
        if rng is None:
            raise ConfigError("train-mode batch_iter needs a seeded generator")
        order = rng.permutation(ds.n)
        flips = (rng.random(ds.n) < 0.5) if augment.horizontal_flip else None
    elif mode == "eval":
        order = np.arange(ds.n)
        flips = None
    else:
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")

    for start in range(0, ds.n, batch_size):
        idx = order[start:start + batch_size]
        images = ds.images[idx]
        if flips is not None:
            sel = flips[idx]
            if sel.any():
                images = images.copy()
                images[sel] = flip_horizontal(images[sel])
        yield images, ds.labels[idx]
