"""Class prototypes: per-client means, server aggregation, nearest-prototype prediction.

Means are accumulated in float64 after sorting the summands along the
reduction axis, which makes every result independent of sample and client
order bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import nn
from .data import ClientShard, Dataset
from .errors import InvalidInputError, ParseError

MAGIC = b"PRO1"
HEADER = struct.Struct("<4sHH")  # magic, entry count, embedding dim
RECORD_PREFIX = struct.Struct("<ii")  # class id, count


class Prototype(NamedTuple):
    vector: np.ndarray
    count: int


def ordered_sum(stack: np.ndarray) -> np.ndarray:
    """Sum over axis 0 in float64, insensitive to row order."""
    return np.sort(stack.astype(np.float64), axis=0).sum(axis=0)


def _ordered_mean(stack: np.ndarray) -> np.ndarray:
    return ordered_sum(stack) / stack.shape[0]


@dataclass
class PrototypeSet:
    """Mapping class id -> (mean embedding, count).

    For a client's local set the count is the number of supporting samples;
    for the global set it is the number of contributing clients.
    """

    entries: dict[int, Prototype] = field(default_factory=dict)
    client_id: int | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, j: int) -> bool:
        return j in self.entries

    def __getitem__(self, j: int) -> Prototype:
        return self.entries[j]

    @property
    def classes(self) -> list[int]:
        return sorted(self.entries)

    @property
    def dim(self) -> int:
        if not self.entries:
            raise InvalidInputError("empty prototype set has no dimension")
        return int(next(iter(self.entries.values())).vector.shape[0])

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """(class ids ascending, stacked vectors)."""
        ids = np.array(self.classes, dtype=np.int64)
        return ids, np.stack([self.entries[j].vector for j in ids])

    def to_bytes(self) -> bytes:
        """Little-endian: header (b"PRO1", u16 entries, u16 d), then per class
        ascending: i32 class id, i32 count, d x f32."""
        d = self.dim if self.entries else 0
        parts = [HEADER.pack(MAGIC, len(self.entries), d)]
        for j in self.classes:
            p = self.entries[j]
            parts.append(RECORD_PREFIX.pack(j, p.count))
            parts.append(np.asarray(p.vector, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PrototypeSet":
        if len(raw) < HEADER.size:
            raise ParseError("prototype record shorter than its header")
        magic, n, d = HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise ParseError(f"bad prototype magic {magic!r}")
        rec = RECORD_PREFIX.size + 4 * d
        if len(raw) != HEADER.size + n * rec:
            raise ParseError(f"expected {HEADER.size + n * rec} bytes, got {len(raw)}")
        entries = {}
        off = HEADER.size
        for _ in range(n):
            j, count = RECORD_PREFIX.unpack_from(raw, off)
            vec = np.frombuffer(raw, dtype="<f4", count=d, offset=off + RECORD_PREFIX.size)
            entries[j] = Prototype(vec.astype(np.float32), count)
            off += rec
        return cls(entries)


def serialized_size(n_entries: int, dim: int) -> int:
    return HEADER.size + n_entries * (RECORD_PREFIX.size + 4 * dim)


LocalPrototypeSet = PrototypeSet
GlobalPrototypeSet = PrototypeSet


def prototypes_from_embeddings(
    emb: np.ndarray, labels: Sequence[int], client_id: int | None = None
) -> PrototypeSet:
    labels = np.asarray(labels)
    entries = {}
    for j in np.unique(labels):
        rows = emb[labels == j]
        entries[int(j)] = Prototype(_ordered_mean(rows).astype(emb.dtype), int(len(rows)))
    return PrototypeSet(entries, client_id)


def compute_local_prototypes(
    params: nn.ModelParams, shard: ClientShard, ds: Dataset, batch_size: int = 1000
) -> PrototypeSet:
    """Mean embedding per class over the shard's samples of ``ds``."""
    if shard.size == 0:
        raise InvalidInputError(f"client {shard.client_id} has an empty shard")
    local = ds.take(shard.indices)
    return prototypes_from_local_data(params, local, shard.client_id, batch_size)


def prototypes_from_local_data(
    params: nn.ModelParams, local: Dataset, client_id: int | None = None, batch_size: int = 1000
) -> PrototypeSet:
    emb = embed_all(params, local.images, batch_size)
    return prototypes_from_embeddings(emb, local.labels, client_id)


def embed_all(params: nn.ModelParams, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    return np.concatenate(
        [nn.embed(params, images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    )


def aggregate_global_prototypes(locals_: Sequence[PrototypeSet]) -> PrototypeSet:
    """Per class, the unweighted mean of the local prototypes of clients holding it."""
    if not locals_:
        raise InvalidInputError("no local prototype sets to aggregate")
    dims = {p.dim for p in locals_ if len(p)}
    if len(dims) > 1:
        raise InvalidInputError(f"inconsistent prototype dimensions {sorted(dims)}")
    by_class: dict[int, list[np.ndarray]] = {}
    for local in locals_:
        for j, proto in local.entries.items():
            by_class.setdefault(j, []).append(proto.vector)
    entries = {}
    for j in sorted(by_class):
        vecs = np.stack(by_class[j])
        entries[j] = Prototype(_ordered_mean(vecs).astype(vecs.dtype), len(vecs))
    return PrototypeSet(entries)


def nearest_prototype(emb: np.ndarray, globals_: PrototypeSet) -> np.ndarray:
    """Class id of the closest prototype (Euclidean) for each row of ``emb``."""
    if not len(globals_):
        raise InvalidInputError("global prototype set is empty")
    ids, protos = globals_.matrix()
    diff = emb[:, None, :].astype(np.float64) - protos[None, :, :].astype(np.float64)
    dist2 = np.einsum("nkd,nkd->nk", diff, diff)
    # ids ascend and argmin keeps the first minimum: ties go to the lowest class
    return ids[np.argmin(dist2, axis=1)]


def nearest_prototype_predict(
    params: nn.ModelParams, globals_: PrototypeSet, batch: np.ndarray
) -> np.ndarray:
    if not len(globals_):
        raise InvalidInputError("global prototype set is empty")
    return nearest_prototype(nn.embed(params, batch), globals_)
