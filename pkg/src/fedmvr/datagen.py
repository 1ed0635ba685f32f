"""Datasets, Dirichlet label partitioning and minibatch sampling."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nummath import Batch

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MAX_PARTITION_RETRIES = 8


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    def __init__(self, path, expected: int, actual: int):
        super().__init__(f"{path}: magic number 0x{actual:08x}, expected 0x{expected:08x}")


class TruncatedFileError(IdxFormatError):
    def __init__(self, path, expected: int, actual: int):
        super().__init__(f"{path}: expected {expected} payload bytes, found {actual}")


class CountMismatchError(IdxFormatError):
    def __init__(self, n_images: int, n_labels: int):
        super().__init__(f"{n_images} images but {n_labels} labels")


class PartitionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def take(self, indices) -> Batch:
        idx = np.asarray(indices)
        return Batch(self.inputs[idx], self.labels[idx])

    def head(self, n: int) -> "Dataset":
        return Dataset(self.inputs[:n], self.labels[:n], self.num_classes)

    def as_batch(self) -> Batch:
        return Batch(self.inputs, self.labels)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray

    def __post_init__(self):
        if self.indices.size < 1:
            raise ValueError(f"client {self.client_id} has an empty shard")
        if np.any(np.diff(self.indices) <= 0):
            raise ValueError("shard indices must be strictly increasing")

    @property
    def sample_count(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class PartitionConfig:
    n_clients: int
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, n_dims: int) -> tuple[tuple[int, ...], bytes]:
    with _open(path) as f:
        raw = f.read()
    header_len = 4 * (1 + n_dims)
    if len(raw) < header_len:
        raise TruncatedFileError(path, header_len, len(raw))
    got_magic, *dims = struct.unpack(f">{1 + n_dims}I", raw[:header_len])
    if got_magic != magic:
        raise BadMagicError(path, magic, got_magic)
    payload = raw[header_len:]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        raise TruncatedFileError(path, expected, len(payload))
    return tuple(dims), payload[:expected]


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels are scaled to [0, 1]."""
    (n_img, rows, cols), pixels = _read_idx(images_path, IMAGE_MAGIC, 3)
    (n_lab,), labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if n_img != n_lab:
        raise CountMismatchError(n_img, n_lab)
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(n_img, rows * cols) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    return Dataset(x, y, 10)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX pair.

    Paths ending in ``.gz`` are gzip-compressed with a zeroed mtime so output
    bytes are reproducible.
    """
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    blobs = [
        (images_path, struct.pack(">4I", IMAGE_MAGIC, *images.shape) + images.tobytes()),
        (labels_path, struct.pack(">2I", LABEL_MAGIC, labels.shape[0]) + labels.tobytes()),
    ]
    for path, blob in blobs:
        path = Path(path)
        if path.suffix == ".gz":
            blob = gzip.compress(blob, mtime=0)
        path.write_bytes(blob)


def gen_synthetic(seed: int, n_samples: int, input_dim: int, num_classes: int, noise: float) -> Dataset:
    """Gaussian blobs: one N(0, I) centroid per class plus ``noise``-scaled Gaussian jitter.

    Labels cycle through the classes before shuffling, so class counts differ
    by at most one.
    """
    if num_classes < 2 or input_dim < 1 or n_samples < num_classes:
        raise ValueError("need num_classes >= 2, input_dim >= 1 and n_samples >= num_classes")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    centroids = rng.normal(size=(num_classes, input_dim))
    labels = rng.permutation(np.arange(n_samples) % num_classes)
    inputs = centroids[labels] + noise * rng.normal(size=(n_samples, input_dim))
    return Dataset(inputs, labels.astype(np.int64), num_classes)


def dirichlet_partition(ds: Dataset, cfg: PartitionConfig) -> list[ClientShard]:
    """Split ``ds`` across clients with per-class Dirichlet(alpha) proportions.

    Each class's samples are shuffled and cut into contiguous blocks sized by
    the drawn proportions. Draws leaving any client empty are retried with the
    next seed offset.
    """
    n = len(ds)
    if cfg.n_clients > n:
        raise ValueError(f"{cfg.n_clients} clients but only {n} samples")
    if cfg.n_clients == 1:
        return [ClientShard(0, np.arange(n))]
    for attempt in range(MAX_PARTITION_RETRIES):
        rng = np.random.default_rng([cfg.seed, attempt])
        owned: list[list[np.ndarray]] = [[] for _ in range(cfg.n_clients)]
        for c in range(ds.num_classes):
            members = np.flatnonzero(ds.labels == c)
            if members.size == 0:
                continue
            members = rng.permutation(members)
            props = rng.dirichlet(np.full(cfg.n_clients, cfg.alpha))
            cuts = np.round(np.cumsum(props)[:-1] * members.size).astype(int)
            for client, block in enumerate(np.split(members, cuts)):
                owned[client].append(block)
        shards = [np.sort(np.concatenate(blocks)) for blocks in owned]
        if all(s.size for s in shards):
            return [ClientShard(i, s) for i, s in enumerate(shards)]
    raise PartitionError(
        f"could not give every one of {cfg.n_clients} clients a sample "
        f"(alpha={cfg.alpha}) after {MAX_PARTITION_RETRIES} draws"
    )


def sample_batch(ds: Dataset, shard: ClientShard, batch_size: int, rng: np.random.Generator) -> Batch:
    """Draw ``batch_size`` distinct shard rows uniformly; rows come back in index order."""
    if not 1 <= batch_size <= shard.sample_count:
        raise ValueError(f"batch_size {batch_size} outside [1, {shard.sample_count}]")
    picks = np.sort(rng.choice(shard.sample_count, size=batch_size, replace=False))
    return ds.take(shard.indices[picks])


def shard_batch(ds: Dataset, shard: ClientShard) -> Batch:
    return ds.take(shard.indices)


def local_step_count(epochs: int, n_samples: int, batch_size: int) -> int:
    return max(1, (epochs * n_samples) // batch_size)


def class_histogram(ds: Dataset, shard: ClientShard) -> np.ndarray:
    return np.bincount(ds.labels[shard.indices], minlength=ds.num_classes)


def mean_tv_distance(ds: Dataset, shards: list[ClientShard]) -> float:
    """Mean total-variation distance between each shard's label mix and the global one."""
    overall = np.bincount(ds.labels, minlength=ds.num_classes) / len(ds)
    tvs = []
    for shard in shards:
        h = class_histogram(ds, shard)
        tvs.append(0.5 * np.abs(h / h.sum() - overall).sum())
    return float(np.mean(tvs))
