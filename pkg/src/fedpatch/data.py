"""Datasets, client partitioning and trigger handling."""
from __future__ import annotations

import gzip
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, FormatError, InputError

log = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
IMAGE_SIDE = 28
NUM_CLASSES = 10

DATA_ROOT_ENV = "FEDPATCH_DATA_ROOT"

_DATASET_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
_DATASET_DIRS = {"mnist": "mnist", "fashion-mnist": "fashion-mnist"}


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    # marks samples belonging to the second term of a two-term loss
    # (poisoned samples for attackers, patch samples for defenders)
    poisoned: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or self.images.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
            if not (self.images.size == 0 and self.images.shape[0] == 0):
                raise InputError(f"images must have shape [N,28,28], got {self.images.shape}")
            self.images = self.images.reshape(0, IMAGE_SIDE, IMAGE_SIDE)
        if self.labels.shape != (self.images.shape[0],):
            raise InputError("images and labels disagree on sample count")
        if len(self):
            if self.images.min() < 0.0 or self.images.max() > 1.0:
                raise InputError("pixel values must lie in [0, 1]")
            if self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES:
                raise InputError(f"labels must lie in 0..{NUM_CLASSES - 1}")
        if self.poisoned is not None:
            self.poisoned = np.asarray(self.poisoned, dtype=bool)
            if self.poisoned.shape != self.labels.shape:
                raise InputError("poisoned mask length does not match sample count")

    def __len__(self):
        return int(self.labels.shape[0])

    @classmethod
    def empty(cls) -> "LabeledDataset":
        return cls(np.zeros((0, IMAGE_SIDE, IMAGE_SIDE), np.float32), np.zeros(0, np.int64))

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        poisoned = None if self.poisoned is None else self.poisoned[indices]
        return LabeledDataset(self.images[indices], self.labels[indices], poisoned)

    def of_class(self, c: int) -> "LabeledDataset":
        return self.subset(np.flatnonzero(self.labels == c))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=NUM_CLASSES)

    def second_term_mask(self) -> np.ndarray:
        return np.zeros(len(self), bool) if self.poisoned is None else self.poisoned

    @staticmethod
    def concat(first: "LabeledDataset", second: "LabeledDataset") -> "LabeledDataset":
        """Join two sets; samples of ``second`` are flagged as second-term."""
        images = np.concatenate([first.images, second.images])
        labels = np.concatenate([first.labels, second.labels])
        flags = np.concatenate([first.second_term_mask(), np.ones(len(second), bool)])
        return LabeledDataset(images, labels, flags)


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: header truncated")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(image_path, label_path) -> LabeledDataset:
    """Parse an IDX image/label file pair; pixels are scaled to [0, 1]."""
    images = _read_idx(image_path, IMAGE_MAGIC, 3)
    labels = _read_idx(label_path, LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
        raise FormatError(f"expected 28x28 images, got {images.shape[1:]}")
    if images.shape[0] == 0:
        raise FormatError("IDX files contain no samples")
    if labels.max() >= NUM_CLASSES:
        raise FormatError("label byte outside 0..9")
    return LabeledDataset(images.astype(np.float32) / np.float32(255.0), labels.astype(np.int64))


def write_idx(dataset: LabeledDataset, image_path, label_path):
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    with open(image_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, *pixels.shape))
        fh.write(pixels.tobytes())
    with open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, len(dataset)))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def data_root(explicit=None) -> Path:
    return Path(explicit or os.environ.get(DATA_ROOT_ENV) or Path.home() / "data")


def dataset_paths(name: str, split: str, root=None):
    """Locate the (images, labels) IDX files of a named dataset split."""
    if name not in _DATASET_DIRS:
        raise ConfigurationError(f"unknown dataset {name!r}; expected one of {sorted(_DATASET_DIRS)}")
    base = data_root(root) / _DATASET_DIRS[name]
    found = []
    for stem in _DATASET_FILES[split]:
        for candidate in (base / stem, base / (stem + ".gz")):
            if candidate.exists():
                found.append(candidate)
                break
        else:
            found.append(base / stem)
    return tuple(found)


def load_dataset(name: str, split: str, root=None) -> LabeledDataset:
    return load_idx(*dataset_paths(name, split, root))


def subsample(dataset: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Seeded uniform subset holding ceil(fraction * N) samples, original order kept."""
    if not 0 < fraction <= 1:
        raise ConfigurationError("data fraction must lie in (0, 1]")
    if fraction == 1:
        return dataset
    n = math.ceil(fraction * len(dataset))
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), size=n, replace=False))
    return dataset.subset(idx)


@dataclass
class Trigger:
    """Additive trigger ``mask * pattern`` mapping ``source`` to ``target``.

    ``source`` is None for attack triggers that apply to every non-target class.
    """

    mask: np.ndarray
    pattern: np.ndarray
    source: Optional[int]
    target: int

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float32)
        self.pattern = np.asarray(self.pattern, dtype=np.float32)
        if self.mask.shape != (IMAGE_SIDE, IMAGE_SIDE) or self.pattern.shape != self.mask.shape:
            raise InputError("trigger mask and pattern must be 28x28")
        if self.source is not None and self.source == self.target:
            raise InputError("trigger source and target classes must differ")
        if self.mask.min() < 0 or self.mask.max() > 1 or self.pattern.min() < 0 or self.pattern.max() > 1:
            raise InputError("trigger mask and pattern must lie in [0, 1]")

    @property
    def delta(self) -> np.ndarray:
        return self.mask * self.pattern

    def is_binary(self) -> bool:
        return bool(np.all((self.mask == 0) | (self.mask == 1)))

    def l1(self) -> float:
        return float(np.abs(self.delta.astype(np.float64)).sum())


def default_trigger(seed: int, target: int = 0) -> Trigger:
    """5x5 patch on rows/cols 22..26 with intensities from uniform[0.5, 1]."""
    rng = np.random.default_rng(seed)
    mask = np.zeros((IMAGE_SIDE, IMAGE_SIDE), np.float32)
    pattern = np.zeros_like(mask)
    mask[22:27, 22:27] = 1.0
    pattern[22:27, 22:27] = rng.uniform(0.5, 1.0, size=(5, 5))
    return Trigger(mask, pattern, None, target)


def apply_trigger(x: np.ndarray, trig: Trigger) -> np.ndarray:
    """clamp(x + m*gamma, 0, 1); off-mask pixels are returned untouched."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-2:] != trig.mask.shape:
        raise InputError(f"image shape {x.shape} does not match trigger {trig.mask.shape}")
    on = trig.mask != 0
    return np.where(on, np.clip(x + trig.delta, 0.0, 1.0), x).astype(np.float32)


def build_poisoned_dataset(local: LabeledDataset, trig: Trigger, poison_fraction: float,
                           seed: int) -> LabeledDataset:
    """Trigger and relabel ceil(poison_fraction * N) samples as the target class.

    Non-target samples are chosen first; target-class samples are only
    drawn once every other sample is already poisoned.
    """
    if len(local) == 0:
        raise InputError("cannot poison an empty dataset")
    if not 0 < poison_fraction <= 1:
        raise ConfigurationError("poison fraction must lie in (0, 1]")
    n_poison = math.ceil(poison_fraction * len(local))
    rng = np.random.default_rng(seed)
    others = rng.permutation(np.flatnonzero(local.labels != trig.target))
    same = rng.permutation(np.flatnonzero(local.labels == trig.target))
    chosen = np.concatenate([others, same])[:n_poison]
    images = local.images.copy()
    labels = local.labels.copy()
    images[chosen] = apply_trigger(images[chosen], trig)
    labels[chosen] = trig.target
    flags = np.zeros(len(local), bool)
    flags[chosen] = True
    return LabeledDataset(images, labels, flags)


def poison_test_set(test: LabeledDataset, trig: Trigger, target: Optional[int] = None) -> LabeledDataset:
    """Triggered copies of every non-target test sample, original labels kept."""
    target = trig.target if target is None else target
    keep = np.flatnonzero(test.labels != target)
    if keep.size == 0:
        raise InputError(f"every test sample already belongs to target class {target}")
    return LabeledDataset(apply_trigger(test.images[keep], trig), test.labels[keep])


@dataclass
class PartitionPlan:
    clients: list
    scheme: str
    seed: int
    num_samples: int = field(default=0)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.clients])

    def validate(self):
        joined = np.concatenate(self.clients) if self.clients else np.zeros(0, np.int64)
        if joined.size != self.num_samples or np.unique(joined).size != joined.size:
            raise ConfigurationError("partition is not disjoint")
        if joined.size and (joined.min() != 0 or joined.max() != self.num_samples - 1):
            raise ConfigurationError("partition does not cover every sample")

    def client_data(self, dataset: LabeledDataset, k: int) -> LabeledDataset:
        return dataset.subset(self.clients[k])


def partition_iid(dataset: LabeledDataset, K: int, seed: int) -> PartitionPlan:
    """Per-class round-robin after a seeded shuffle; sizes and class counts differ by at most one."""
    if K < 1:
        raise ConfigurationError("client count K must be at least 1")
    if K > len(dataset):
        raise ConfigurationError(f"cannot split {len(dataset)} samples across {K} clients")
    rng = np.random.default_rng(seed)
    buckets = [[] for _ in range(K)]
    cursor = 0
    for c in range(NUM_CLASSES):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        for j, sample in enumerate(idx):
            buckets[(cursor + j) % K].append(sample)
        cursor = (cursor + len(idx)) % K
    clients = [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]
    return PartitionPlan(clients, "iid", seed, len(dataset))


def partition_dirichlet(dataset: LabeledDataset, K: int, alpha: float, seed: int,
                        max_retries: int = 100) -> PartitionPlan:
    """Per-class Dirichlet(alpha) proportions, redrawn until every client holds a sample."""
    if K < 1:
        raise ConfigurationError("client count K must be at least 1")
    if alpha <= 0:
        raise ConfigurationError("Dirichlet alpha must be positive")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(dataset.labels == c) for c in range(NUM_CLASSES)]
    for attempt in range(max_retries):
        buckets = [[] for _ in range(K)]
        for idx in by_class:
            if idx.size == 0:
                continue
            gammas = rng.gamma(alpha, 1.0, size=K)
            props = gammas / gammas.sum() if gammas.sum() > 0 else np.full(K, 1.0 / K)
            idx = rng.permutation(idx)
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
            for k, part in enumerate(np.split(idx, cuts)):
                buckets[k].extend(part.tolist())
        if all(buckets):
            clients = [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]
            return PartitionPlan(clients, f"dirichlet({alpha})", seed, len(dataset))
        log.debug("dirichlet attempt %d left an empty client; redrawing", attempt)
    raise ConfigurationError(
        f"Dirichlet partition with alpha={alpha} and K={K} left a client empty after {max_retries} draws"
    )
