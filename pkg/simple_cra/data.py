"""Datasets: CIFAR-10 binary batches, synthetic blobs, augmentation and normalisation."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import CorruptDatasetError, InvalidConfigError
from .tensor import Tensor, load_tensor, save_tensor
from .util import validateparam

logger = logging.getLogger("cra")

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_CLASSES = 10
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
AUGMENT_POLICIES = ("pad4-crop32", "horizontal-flip")
CROP_PAD = 4


@dataclass
class LabeledDataset:
    """Images [N, 3, H, W] in [0, 1] with integer labels in [0, num_classes)."""

    images: Tensor
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    mean: np.ndarray = None
    std: np.ndarray = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.size:
            raise InvalidConfigError(
                f"{self.labels.size} labels do not match images of shape {self.images.shape}"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidConfigError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.data.min() < 0 or self.images.data.max() > 1):
            raise InvalidConfigError("image values must lie in [0, 1]")

    def __len__(self):
        return self.labels.size


def channel_stats(images) -> tuple:
    """Per-channel mean and standard deviation of [N, C, H, W] images."""
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    mean = data.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    std = data.std(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    return mean, np.maximum(std, np.float32(1e-6))


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((images - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)


def _read_cifar_batch(path: Path) -> tuple:
    if not path.is_file():
        raise CorruptDatasetError(path, 0, "batch file is missing")
    blob = np.fromfile(path, dtype=np.uint8)
    whole = blob.size - blob.size % CIFAR_RECORD
    if blob.size == 0 or whole != blob.size:
        raise CorruptDatasetError(path, whole, "truncated record")
    records = blob.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise CorruptDatasetError(path, int(bad[0]) * CIFAR_RECORD, f"label {labels[bad[0]]} out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def _read_cifar_split(directory: Path, files, split) -> LabeledDataset:
    parts = [_read_cifar_batch(directory / name) for name in files]
    images = np.concatenate([p[0] for p in parts]).astype(np.float32) / np.float32(255.0)
    labels = np.concatenate([p[1] for p in parts])
    return LabeledDataset(Tensor(images), labels, CIFAR_CLASSES, split)


def load_cifar10(directory) -> tuple:
    """Read the CIFAR-10 binary distribution (data_batch_1..5.bin, test_batch.bin).

    Both splits carry the training set's per-channel mean and std.

    Raises:
        CorruptDatasetError: a batch file is missing, truncated or holds a bad label
    """
    directory = Path(directory)
    train = _read_cifar_split(directory, CIFAR_TRAIN_FILES, "train")
    test = _read_cifar_split(directory, CIFAR_TEST_FILES, "test")
    train.mean, train.std = channel_stats(train.images)
    test.mean, test.std = train.mean, train.std
    logger.info(f"CIFAR-10 loaded from {directory}: {len(train)} train / {len(test)} test images")
    return train, test


def synth_dataset(
    n: int, num_classes: int, seed: int = 0, noise: float = 0.05, size: int = 32, split: str = "train"
) -> LabeledDataset:
    """Class-balanced Gaussian blobs; class c sits at angle 2*pi*c/k on a ring around the centre.

    Raises:
        InvalidConfigError: fewer than two classes or fewer samples than classes
    """
    if num_classes < 2 or n < num_classes:
        raise InvalidConfigError(f"need n >= num_classes >= 2, got n={n}, num_classes={num_classes}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    radius, sigma = size / 4.0, size / 10.0
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centres = np.stack([size / 2.0 + radius * np.sin(angles), size / 2.0 + radius * np.cos(angles)], axis=1)
    blobs = np.exp(
        -((yy[None] - centres[:, 0, None, None]) ** 2 + (xx[None] - centres[:, 1, None, None]) ** 2)
        / (2.0 * sigma**2)
    ).astype(np.float32)

    images = 0.1 + 0.8 * blobs[labels][:, None] + noise * rng.standard_normal((n, 3, size, size))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    dataset = LabeledDataset(Tensor(images), labels, num_classes, split)
    dataset.mean, dataset.std = channel_stats(dataset.images)
    return dataset


@dataclass
class AugmentParams:
    offsets: np.ndarray  # [N, 2] crop origin in the padded image, each in [0, 2 * pad]
    flips: np.ndarray  # [N] bool


def sample_augment(n: int, rng: np.random.Generator, pad: int = CROP_PAD) -> AugmentParams:
    return AugmentParams(rng.integers(0, 2 * pad + 1, size=(n, 2)), rng.random(n) < 0.5)


def apply_augment(images: np.ndarray, params: AugmentParams, policy=AUGMENT_POLICIES, pad: int = CROP_PAD):
    for name in policy:
        validateparam(name, AUGMENT_POLICIES, InvalidConfigError(f"unknown augmentation '{name}'"))
    out = images
    if "pad4-crop32" in policy:
        if images.shape[2:] != (32, 32):
            raise InvalidConfigError(f"pad4-crop32 needs 32x32 images, got {images.shape[2:]}")
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.stack([padded[i, :, dy : dy + 32, dx : dx + 32] for i, (dy, dx) in enumerate(params.offsets)])
    if "horizontal-flip" in policy:
        out = np.where(params.flips[:, None, None, None], out[..., ::-1], out)
    return np.ascontiguousarray(out, dtype=images.dtype)


def augment(images: np.ndarray, rng: np.random.Generator, policy=AUGMENT_POLICIES) -> np.ndarray:
    """Random pad-4 crop back to 32x32 and horizontal flip with p = 0.5."""
    return apply_augment(images, sample_augment(len(images), rng), policy)


def save_dataset(directory, dataset: LabeledDataset) -> Path:
    """Write images.crat, labels.crat and meta.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(directory / "images.crat", dataset.images)
    save_tensor(directory / "labels.crat", Tensor(dataset.labels.astype(np.float32)))
    meta = {"num_classes": dataset.num_classes, "split": dataset.split}
    if dataset.mean is not None:
        meta["mean"] = [float(v) for v in dataset.mean]
        meta["std"] = [float(v) for v in dataset.std]
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return directory


def load_dataset(directory) -> LabeledDataset:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    images = load_tensor(directory / "images.crat")
    labels = load_tensor(directory / "labels.crat").data.astype(np.int64)
    dataset = LabeledDataset(images, labels, meta["num_classes"], meta.get("split", "train"))
    if "mean" in meta:
        dataset.mean = np.asarray(meta["mean"], dtype=np.float32)
        dataset.std = np.asarray(meta["std"], dtype=np.float32)
    return dataset
