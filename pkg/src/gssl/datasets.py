"""Dataset access, long-tailed subsampling and semi-supervised splits."""

from __future__ import annotations

import hashlib
import math
import os
import pickle
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.utils.data import Dataset

from .pretext import PretextTask, canonical_order, transform_sample

DATA_ROOT_ENV = "GSSL_DATA_ROOT"

CIFAR10_DIR = "cifar-10-batches-py"
CIFAR100_DIR = "cifar-100-python"
TINY_IMAGENET_DIR = "tiny-imagenet-200"
CHECKSUM_MANIFEST = "MANIFEST.md5"

# md5 of the files in the official python archives
CANONICAL_MD5 = {
    "cifar10": {
        "data_batch_1": "c99cafc152244af753f735de768cd75f",
        "data_batch_2": "d4bba439e000b95fd0a9bffe97cbabec",
        "data_batch_3": "54ebc095f3ab1f0389bbae665268c751",
        "data_batch_4": "634d18415352ddfa80567beed471001a",
        "data_batch_5": "482c414d41f54cd18b22e5b47cb7c3cb",
        "test_batch": "40351d587109b95175f43aff81a1287e",
    },
    "cifar100": {
        "train": "16019d7e3df5f24257cddd939b257f8d",
        "test": "f0ef6b0ae62326f3e7ffdfab6717acfc",
    },
}

NUM_CLASSES = {"cifar10": 10, "cifar100": 100, "tinyimagenet": 200}


class DatasetError(RuntimeError):
    pass


@dataclass
class DatasetSplit:
    """Images ``(N, H, W, 3)`` uint8 with labels and their source indices."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    role: str = "train"
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.indices is None:
            self.indices = np.arange(len(self.labels), dtype=np.int64)
        if len(self.images) != len(self.labels) or len(self.indices) != len(self.labels):
            raise ValueError("images, labels and indices must have the same length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def class_positions(self) -> list[np.ndarray]:
        """Positions (within this split) of each class, in split order."""
        return [np.flatnonzero(self.labels == c) for c in range(self.num_classes)]

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def take(self, positions, role: str | None = None) -> "DatasetSplit":
        positions = np.asarray(positions, dtype=np.int64)
        return DatasetSplit(self.images[positions], self.labels[positions], self.num_classes,
                            role or self.role, self.indices[positions])


# on-disk formats -------------------------------------------------------------

def md5sum(path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_manifest_md5(directory: Path) -> dict[str, str] | None:
    path = directory / CHECKSUM_MANIFEST
    if not path.exists():
        return None
    table = {}
    for line in path.read_text().splitlines():
        if line.strip():
            digest, name = line.split(maxsplit=1)
            table[name.strip()] = digest
    return table


def verify_checksums(directory: Path, files: Sequence[str], name: str):
    """Check ``files`` against ``MANIFEST.md5`` if present, else the official digests."""
    table = _read_manifest_md5(directory) or CANONICAL_MD5.get(name, {})
    for fname in files:
        expected = table.get(fname)
        if expected is None:
            raise DatasetError(f"no checksum recorded for {directory / fname}")
        actual = md5sum(directory / fname)
        if actual != expected:
            raise DatasetError(f"checksum mismatch for {directory / fname}: {actual} != {expected}")


def dataset_checksums(directory) -> dict[str, str]:
    directory = Path(directory)
    return {p.name: md5sum(p) for p in sorted(directory.iterdir()) if p.is_file()}


def _unpickle(path):
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="bytes")


def _key(d, name):
    return d[name.encode()] if name.encode() in d else d[name]


def resolve_root(root=None) -> Path:
    root = root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise DatasetError(f"no dataset root given and ${DATA_ROOT_ENV} is unset")
    return Path(root)


def cifar_directory(root, name: str) -> Path:
    root = Path(root)
    sub = CIFAR10_DIR if name == "cifar10" else CIFAR100_DIR
    for cand in (root / sub, root):
        marker = "test_batch" if name == "cifar10" else "test"
        if (cand / marker).exists():
            return cand
    raise DatasetError(f"no {name} archive found under {root}")


def load_cifar(root, name: str = "cifar10", train: bool = True, verify: bool = True) -> DatasetSplit:
    directory = cifar_directory(root, name)
    if name == "cifar10":
        files = [f"data_batch_{i}" for i in range(1, 6)] if train else ["test_batch"]
        label_key = "labels"
    elif name == "cifar100":
        files = ["train"] if train else ["test"]
        label_key = "fine_labels"
    else:
        raise DatasetError(f"not a CIFAR dataset: {name}")
    if verify:
        verify_checksums(directory, files, name)
    data, labels = [], []
    for fname in files:
        d = _unpickle(directory / fname)
        data.append(np.asarray(_key(d, "data"), dtype=np.uint8))
        labels.extend(_key(d, label_key))
    images = np.concatenate(data).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return DatasetSplit(np.ascontiguousarray(images), np.asarray(labels), NUM_CLASSES[name],
                        "train" if train else "test")


def load_tiny_imagenet(root, train: bool = True) -> DatasetSplit:
    from PIL import Image

    root = Path(root)
    directory = root / TINY_IMAGENET_DIR if (root / TINY_IMAGENET_DIR).exists() else root
    wnids_file = directory / "wnids.txt"
    if not wnids_file.exists():
        raise DatasetError(f"no Tiny-ImageNet layout found under {root}")
    wnids = wnids_file.read_text().split()
    index = {w: i for i, w in enumerate(wnids)}
    paths, labels = [], []
    if train:
        for w in wnids:
            for p in sorted((directory / "train" / w / "images").glob("*.JPEG")):
                paths.append(p)
                labels.append(index[w])
    else:
        for line in (directory / "val" / "val_annotations.txt").read_text().splitlines():
            parts = line.split("\t")
            if len(parts) >= 2:
                paths.append(directory / "val" / "images" / parts[0])
                labels.append(index[parts[1]])
    images = np.stack([np.asarray(Image.open(p).convert("RGB"), dtype=np.uint8) for p in paths]) \
        if paths else np.zeros((0, 64, 64, 3), np.uint8)
    return DatasetSplit(images, np.asarray(labels), len(wnids), "train" if train else "test")


def load_dataset(name: str, root=None, train: bool = True, verify: bool = True) -> DatasetSplit:
    root = resolve_root(root)
    if name in ("cifar10", "cifar100"):
        return load_cifar(root, name, train, verify)
    if name == "tinyimagenet":
        return load_tiny_imagenet(root, train)
    raise DatasetError(f"unknown dataset {name!r}")


# long-tailed subsampling -----------------------------------------------------

@dataclass
class ImbalanceSpec:
    rho: float
    num_classes: int
    base_counts: list[int] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"imbalance ratio must be > 0, got {self.rho}")
        if self.rho > 1:
            raise ValueError(f"imbalance ratio must be <= 1, got {self.rho}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not self.base_counts:
            raise ValueError("base_counts must be given")
        if isinstance(self.base_counts, int):
            self.base_counts = [self.base_counts] * self.num_classes
        if len(self.base_counts) != self.num_classes or min(self.base_counts) <= 0:
            raise ValueError("base_counts must hold one positive count per class")


def _floor_decay(n: int, rho: Fraction, i: int, k1: int) -> int:
    # largest m with m <= n * rho**(i/k1), i.e. m**k1 * den**i <= n**k1 * num**i
    num, den = rho.numerator, rho.denominator
    rhs = n ** k1 * num ** i
    m = int(math.floor(n * float(rho) ** (i / k1)))
    while m > 0 and m ** k1 * den ** i > rhs:
        m -= 1
    while (m + 1) ** k1 * den ** i <= rhs:
        m += 1
    return m


def imbalance_counts(spec: ImbalanceSpec) -> list[int]:
    """Per-class sizes ``floor(n_i * rho ** (i / (K - 1)))``, evaluated exactly.

    ``rho`` is taken as the decimal it prints as (``0.01`` is exactly 1/100).
    """
    rho = Fraction(repr(float(spec.rho)))
    k1 = spec.num_classes - 1
    return [_floor_decay(int(n), rho, i, k1) for i, n in enumerate(spec.base_counts)]


def build_imbalanced(dataset: DatasetSplit, spec: ImbalanceSpec) -> DatasetSplit:
    """Keep the first ``n_hat_i`` samples of each class under a seeded permutation."""
    if spec.num_classes != dataset.num_classes:
        raise ValueError("spec and dataset disagree on the number of classes")
    counts = imbalance_counts(spec)
    rng = np.random.default_rng(spec.seed)
    keep = []
    for c, pos in enumerate(dataset.class_positions()):
        if len(pos) < counts[c]:
            raise DatasetError(f"class {c} has {len(pos)} samples, {counts[c]} requested")
        keep.append(rng.permutation(pos)[:counts[c]])
    return dataset.take(np.concatenate(keep), role="train")


def balanced_subset(dataset: DatasetSplit, n: int, seed: int = 0, role: str | None = None) -> DatasetSplit:
    """``n / K`` samples per class under a seeded permutation."""
    k = dataset.num_classes
    if n % k:
        raise ValueError(f"{n} samples cannot be split evenly over {k} classes")
    per_class = n // k
    rng = np.random.default_rng(seed)
    keep = []
    for c, pos in enumerate(dataset.class_positions()):
        if len(pos) < per_class:
            raise DatasetError(f"class {c} has {len(pos)} samples, {per_class} requested")
        keep.append(rng.permutation(pos)[:per_class])
    return dataset.take(np.concatenate(keep), role=role)


def semi_split(dataset: DatasetSplit, num_labeled: int, seed: int = 0) -> tuple[DatasetSplit, DatasetSplit]:
    """Class-balanced labeled subset plus an unlabeled pool of every image."""
    if num_labeled > len(dataset):
        raise ValueError("more labeled samples requested than available")
    labeled = balanced_subset(dataset, num_labeled, seed, role="train")
    unlabeled = dataset.take(np.arange(len(dataset)), role="unlabeled")
    return labeled, unlabeled


# split manifests -------------------------------------------------------------

def write_split_manifest(path, split: DatasetSplit):
    """One ``index class`` line per sample, in split order."""
    with open(path, "w") as fh:
        for idx, lab in zip(split.indices.tolist(), split.labels.tolist()):
            fh.write(f"{idx} {lab}\n")


def read_split_manifest(path) -> tuple[np.ndarray, np.ndarray]:
    rows = np.loadtxt(path, dtype=np.int64, ndmin=2)
    if rows.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return rows[:, 0], rows[:, 1]


def apply_split_manifest(dataset: DatasetSplit, path) -> DatasetSplit:
    indices, labels = read_split_manifest(path)
    lookup = {int(i): p for p, i in enumerate(dataset.indices.tolist())}
    try:
        positions = np.array([lookup[int(i)] for i in indices], dtype=np.int64)
    except KeyError as err:
        raise DatasetError(f"manifest {path} references unknown index {err.args[0]}") from None
    out = dataset.take(positions)
    if not np.array_equal(out.labels, labels):
        raise DatasetError(f"manifest {path} labels do not match the dataset")
    return out


# synthetic CIFAR-format archive ----------------------------------------------

def synthetic_images(labels: np.ndarray, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Class-conditional toy scenes: lit-from-above background plus a class shape.

    The scenes have an up/down asymmetry and class-dependent colours so that
    rotation and channel-order cues exist, like in natural photos.
    """
    n = len(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / (size - 1)
    out = np.empty((n, size, size, 3), np.float32)
    palette = np.array([
        [0.9, 0.2, 0.2], [0.2, 0.8, 0.2], [0.2, 0.3, 0.9], [0.9, 0.8, 0.1], [0.8, 0.2, 0.8],
        [0.1, 0.8, 0.8], [0.95, 0.5, 0.1], [0.5, 0.3, 0.1], [0.6, 0.6, 0.6], [0.3, 0.1, 0.5],
    ], np.float32)
    for j in range(n):
        c = int(labels[j])
        sky = np.array([0.55, 0.7, 0.95]) + rng.normal(0, 0.05, 3)
        ground = np.array([0.35, 0.3, 0.2]) + rng.normal(0, 0.05, 3)
        horizon = 0.55 + rng.normal(0, 0.08)
        w = np.clip((yy - horizon) * 8 + 0.5, 0, 1)[..., None]
        img = (1 - w) * sky + w * ground
        img *= (1.15 - 0.4 * yy)[..., None]
        cx, cy = rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.6)
        r = rng.uniform(0.15, 0.25)
        dx, dy = xx - cx, yy - cy
        kind = c % 10
        if kind == 0:
            mask = dx ** 2 + dy ** 2 < r ** 2
        elif kind == 1:
            mask = (abs(dx) < r) & (abs(dy) < r)
        elif kind == 2:  # upward triangle
            mask = (dy < r) & (dy > -r) & (abs(dx) < (dy + r) / 2)
        elif kind == 3:
            mask = (abs(dy) < r / 3) & (abs(dx) < r * 1.4)
        elif kind == 4:
            mask = (abs(dx) < r / 3) & (abs(dy) < r * 1.4)
        elif kind == 5:
            mask = ((abs(dx) < r / 4) | (abs(dy) < r / 4)) & (abs(dx) < r) & (abs(dy) < r)
        elif kind == 6:
            d2 = dx ** 2 + dy ** 2
            mask = (d2 < r ** 2) & (d2 > (r * 0.6) ** 2)
        elif kind == 7:
            mask = (abs(dx - dy) < r / 3) & (abs(dx) < r)
        elif kind == 8:
            mask = ((dx + r / 2) ** 2 + dy ** 2 < (r / 2) ** 2) | ((dx - r / 2) ** 2 + dy ** 2 < (r / 2) ** 2)
        else:  # L shape
            mask = ((abs(dx + r / 2) < r / 4) & (abs(dy) < r)) | ((abs(dy - r * 0.75) < r / 4) & (abs(dx) < r))
        colour = palette[kind] * (1 + c // 10 * 0.1) + rng.normal(0, 0.05, 3)
        shade = (1.1 - 0.5 * (yy - cy + r))[..., None]
        img = np.where(mask[..., None], colour * shade, img)
        img += rng.normal(0, 0.04, img.shape)
        out[j] = img
    return (np.clip(out, 0, 1) * 255).round().astype(np.uint8)


def write_synthetic_cifar(root, train_per_class: int = 100, test_per_class: int = 20,
                          num_classes: int = 10, seed: int = 0) -> Path:
    """Write a CIFAR-10-layout archive of synthetic scenes with its own md5 manifest."""
    directory = Path(root) / CIFAR10_DIR
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    def batch(per_class):
        labels = rng.permutation(np.repeat(np.arange(num_classes), per_class))
        imgs = synthetic_images(labels, rng)
        return imgs.transpose(0, 3, 1, 2).reshape(len(labels), -1), labels

    data, labels = batch(train_per_class)
    for i, chunk in enumerate(np.array_split(np.arange(len(labels)), 5), start=1):
        with open(directory / f"data_batch_{i}", "wb") as fh:
            pickle.dump({b"data": data[chunk], b"labels": labels[chunk].tolist()}, fh)
    data, labels = batch(test_per_class)
    with open(directory / "test_batch", "wb") as fh:
        pickle.dump({b"data": data, b"labels": labels.tolist()}, fh)
    with open(directory / "batches.meta", "wb") as fh:
        pickle.dump({b"label_names": [f"class_{c}".encode() for c in range(num_classes)]}, fh)
    names = [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]
    with open(directory / CHECKSUM_MANIFEST, "w") as fh:
        for name in names:
            fh.write(f"{md5sum(directory / name)}  {name}\n")
    return directory


# torch views -----------------------------------------------------------------

def to_tensor(image: np.ndarray) -> torch.Tensor:
    """``(H, W, 3)`` uint8 -> ``(3, H, W)`` float in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float().div_(255.0)


def random_crop_flip(image: torch.Tensor, rng: np.random.Generator, pad: int = 4) -> torch.Tensor:
    """Zero-pad by ``pad``, random crop back to size, random horizontal flip."""
    _, h, w = image.shape
    padded = torch.nn.functional.pad(image, (pad, pad, pad, pad))
    y, x = int(rng.integers(2 * pad + 1)), int(rng.integers(2 * pad + 1))
    out = padded[:, y:y + h, x:x + w]
    if rng.random() < 0.5:
        out = torch.flip(out, dims=(2,))
    return out.contiguous()


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


class ImageDataset(Dataset):
    """Plain ``(image, label)`` view of a split."""

    def __init__(self, split: DatasetSplit):
        self.split = split

    def __len__(self):
        return len(self.split)

    def __getitem__(self, i):
        return to_tensor(self.split.images[i]), int(self.split.labels[i])


class PretextDataset(Dataset):
    """Base augmentation followed by the pretext transforms.

    Yields ``(image, class_label, pseudo_labels)``; randomness is a pure
    function of ``(seed, epoch, index)`` so worker count does not matter.
    """

    def __init__(self, split: DatasetSplit, tasks: Sequence[PretextTask], seed: int = 0,
                 prob: float = 1.0, base_augment: bool = True):
        self.split = split
        self.tasks = canonical_order(list(tasks))
        self.seed = seed
        self.prob = prob
        self.base_augment = base_augment
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.split)

    def __getitem__(self, i):
        rng = sample_rng(self.seed, self.epoch, i)
        img = to_tensor(self.split.images[i])
        if self.base_augment:
            img = random_crop_flip(img, rng)
        sample = transform_sample(img, int(self.split.labels[i]), self.tasks, rng, self.prob)
        return sample.image, sample.class_label, torch.tensor(sample.label_values(), dtype=torch.long)
