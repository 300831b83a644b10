"""IDX loading, pool subsampling and Dirichlet label-skew partitioning."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadMagicError, CountMismatchError, InvalidInputError, TruncatedFileError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, 1, 28, 28) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int = 10

    def __post_init__(self):
        if self.images.ndim != 4:
            raise InvalidInputError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InvalidInputError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) == 0:
            raise InvalidInputError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise InvalidInputError(f"labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(raw: bytes, expected_magic: int, path: Path) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file shorter than the 4-byte magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(
            f"{path}: bad magic number 0x{magic:08x} (expected 0x{expected_magic:08x})"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    if len(raw) - header < n:
        raise TruncatedFileError(
            f"{path}: header declares {n} bytes of data, found {len(raw) - header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped, detected by ``.gz``)."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    pixels = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, labels_path)
    if len(pixels) != len(labels):
        raise CountMismatchError(
            f"{images_path} has {len(pixels)} images but {labels_path} has {len(labels)} labels"
        )
    images = (pixels.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return Dataset(images, labels.astype(np.int64), class_count)


def subsample_indices(n_total: int, n: int, seed: int) -> np.ndarray:
    if n > n_total:
        raise InvalidInputError(f"cannot draw {n} samples from {n_total}")
    if n < 1:
        raise InvalidInputError("sample count must be >= 1")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_total, size=n, replace=False))


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    """Uniform draw of ``n`` samples without replacement, kept in source order."""
    return ds.take(subsample_indices(len(ds), n, seed))


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int = 20
    alpha: float = 0.1
    pool_size: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise InvalidInputError("n_clients must be >= 1")
        if not self.alpha > 0:
            raise InvalidInputError(f"alpha must be > 0, got {self.alpha}")
        if self.pool_size < 1:
            raise InvalidInputError("pool_size must be >= 1")


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray
    class_counts: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return int(len(self.indices))


def _largest_remainder(props: np.ndarray, total: int) -> np.ndarray:
    quotas = props * total
    counts = np.floor(quotas).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort: equal remainders go to the lowest client id
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(
    labels: Sequence[int], spec: PartitionSpec, n_classes: int | None = None
) -> list[ClientShard]:
    """Split sample indices across clients with per-class Dir(alpha) proportions.

    Each class's indices are shuffled and cut according to largest-remainder
    rounding of the drawn proportions. Clients left empty receive one sample
    at a time from the current largest shard.
    """
    if not isinstance(spec, PartitionSpec):
        raise InvalidInputError("spec must be a PartitionSpec")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise InvalidInputError("labels are empty")
    if spec.n_clients > labels.size:
        raise InvalidInputError(
            f"{spec.n_clients} clients cannot all be nonempty with {labels.size} samples"
        )
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    rng = np.random.default_rng(spec.seed)
    k = spec.n_clients
    buckets: list[list[np.ndarray]] = [[] for _ in range(k)]

    for j in range(n_classes):
        members = np.flatnonzero(labels == j)
        # draw unconditionally so later classes do not depend on earlier sizes
        gammas = rng.gamma(spec.alpha, 1.0, size=k)
        members = rng.permutation(members)
        if members.size == 0:
            continue
        total = gammas.sum()
        if total > 0:
            props = gammas / total
        else:  # every draw underflowed; degenerate one-hot proportion
            props = np.zeros(k)
            props[int(rng.integers(k))] = 1.0
        counts = _largest_remainder(props, members.size)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for i in range(k):
            buckets[i].append(members[bounds[i]:bounds[i + 1]])

    shards = [np.sort(np.concatenate(b)) if b else np.zeros(0, np.int64) for b in buckets]
    while True:
        sizes = np.array([s.size for s in shards])
        empty = np.flatnonzero(sizes == 0)
        if empty.size == 0:
            break
        donor = int(np.argmax(sizes))  # argmax returns the lowest id on ties
        moved = shards[donor][-1]
        shards[donor] = shards[donor][:-1]
        shards[int(empty[0])] = np.array([moved], dtype=np.int64)

    return [
        ClientShard(i, s.astype(np.int64), np.bincount(labels[s], minlength=n_classes))
        for i, s in enumerate(shards)
    ]


def partition_digest(shards: Sequence[ClientShard]) -> str:
    h = hashlib.sha256()
    for s in shards:
        h.update(struct.pack("<ii", s.client_id, s.size))
        h.update(np.ascontiguousarray(s.indices, dtype="<i8").tobytes())
    return h.hexdigest()


def label_entropy(counts: np.ndarray) -> float:
    """Shannon entropy (nats) of a class-count vector."""
    counts = np.asarray(counts, dtype=np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
