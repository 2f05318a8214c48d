"""MNIST loading, synthetic data and client partitioning."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DATA_DIR_ENV = "FEDTAN_MNIST_DIR"


class IdxFormatError(ValueError):
    """Base class for malformed IDX files."""


class MagicMismatchError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    samples: np.ndarray  # (count, input_dim)
    labels: np.ndarray   # (count,) int
    class_count: int

    def __post_init__(self):
        if self.samples.ndim != 2 or self.labels.shape != (self.samples.shape[0],):
            raise ValueError(
                f"samples {self.samples.shape} and labels {self.labels.shape} disagree")
        if self.labels.size == 0:
            raise ValueError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.intp)
        return LabeledDataset(self.samples[indices], self.labels[indices], self.class_count)

    @staticmethod
    def concatenate(parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        return LabeledDataset(
            np.concatenate([p.samples for p in parts]),
            np.concatenate([p.labels for p in parts]),
            max(p.class_count for p in parts))


@dataclass(frozen=True)
class PartitionSpec:
    client_indices: tuple
    weights: np.ndarray

    @classmethod
    def from_indices(cls, client_indices) -> "PartitionSpec":
        lists = tuple(np.asarray(ix, dtype=np.intp) for ix in client_indices)
        sizes = np.array([len(ix) for ix in lists], dtype=float)
        if np.any(sizes == 0):
            raise ValueError("every client needs at least one sample")
        flat = np.concatenate(lists)
        if np.unique(flat).size != flat.size:
            raise ValueError("client index lists overlap")
        return cls(lists, sizes / sizes.sum())

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def split(self, dataset: LabeledDataset) -> list[LabeledDataset]:
        return [dataset.subset(ix) for ix in self.client_indices]


# --------------------------------------------------------------------------
# IDX parsing
# --------------------------------------------------------------------------

def _read_idx(path, expected_magic, ndim):
    data = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: shorter than the magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise MagicMismatchError(
            f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if len(data) < header:
        raise TruncatedFileError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    n = int(np.prod(dims))
    if len(data) - header < n:
        raise TruncatedFileError(f"{path}: {len(data) - header} payload bytes, expected {n}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, class_count: int = 10) -> LabeledDataset:
    """Parse an IDX image/label file pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    samples = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(samples, labels.astype(np.int64), class_count)


def write_idx(path, array: np.ndarray, magic: int) -> None:
    """Write a uint8 array in IDX format (used to build fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def mnist_dir(path=None) -> Path:
    return Path(path or os.environ.get(DATA_DIR_ENV) or "data/mnist")


def load_mnist(split: str = "train", path=None) -> LabeledDataset:
    images, labels = MNIST_FILES[split]
    root = mnist_dir(path)
    return load_mnist_idx(root / images, root / labels)


def random_subset(dataset: LabeledDataset, size: int, seed: int) -> LabeledDataset:
    if not 0 < size <= len(dataset):
        raise ValueError(f"subset size {size} out of range for {len(dataset)} samples")
    rng = np.random.default_rng(seed)
    return dataset.subset(np.sort(rng.choice(len(dataset), size, replace=False)))


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------

def synth_gaussian(class_count: int, per_class: int, input_dim: int, seed: int,
                   separation: float = 3.0, noise: float = 1.0) -> LabeledDataset:
    """Isotropic Gaussian blobs around seeded random class centers."""
    for name, v in (("class_count", class_count), ("per_class", per_class),
                    ("input_dim", input_dim)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(class_count, input_dim)) * separation
    labels = np.repeat(np.arange(class_count), per_class)
    samples = centers[labels] + noise * rng.normal(size=(labels.size, input_dim))
    return LabeledDataset(samples, labels, class_count)


# --------------------------------------------------------------------------
# Partitions
# --------------------------------------------------------------------------

def partition_iid(dataset: LabeledDataset, num_clients: int, seed: int) -> PartitionSpec:
    """Seeded shuffle, equal split; the remainder goes to the earliest clients."""
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if num_clients > len(dataset):
        raise ValueError(f"{num_clients} clients but only {len(dataset)} samples")
    order = np.random.default_rng(seed).permutation(len(dataset))
    return PartitionSpec.from_indices(np.array_split(order, num_clients))


def shard_classes(num_clients: int, classes_per_client: int, class_count: int) -> list[list[int]]:
    """Wrap-around label shards: client i holds k consecutive classes
    starting at ``i * class_count / num_clients``."""
    if num_clients < 1 or classes_per_client < 1:
        raise ValueError("num_clients and classes_per_client must be >= 1")
    if class_count % num_clients:
        raise ValueError(f"{num_clients} clients do not divide {class_count} classes")
    if classes_per_client > class_count:
        raise ValueError(f"{classes_per_client} classes per client > {class_count} classes")
    stride = class_count // num_clients
    if classes_per_client < stride:
        raise ValueError(
            f"{classes_per_client} classes per client leave classes unassigned "
            f"(need at least {stride})")
    return [[(i * stride + j) % class_count for j in range(classes_per_client)]
            for i in range(num_clients)]


def partition_by_label(dataset: LabeledDataset, num_clients: int,
                       classes_per_client: int, seed: int = 0) -> PartitionSpec:
    """Non-i.i.d. label-shard partition.

    Each class's samples are shuffled and split evenly (disjointly) among
    the clients that hold that class.
    """
    assignment = shard_classes(num_clients, classes_per_client, dataset.class_count)
    rng = np.random.default_rng(seed)
    owned = [[] for _ in range(num_clients)]
    for c in range(dataset.class_count):
        holders = [i for i, cs in enumerate(assignment) if c in cs]
        members = np.flatnonzero(dataset.labels == c)
        rng.shuffle(members)
        for i, chunk in zip(holders, np.array_split(members, len(holders))):
            owned[i].append(chunk)
    return PartitionSpec.from_indices(
        [np.sort(np.concatenate(parts)) for parts in owned])
