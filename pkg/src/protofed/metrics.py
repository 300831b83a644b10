"""Accuracy evaluation and byte accounting for simulated traffic."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .data import Dataset
from .prototypes import PrototypeSet, embed_all, nearest_prototype

log = logging.getLogger(__name__)

TENSOR_HEADER_BYTES = 16
EVAL_BATCH = 1000


def bytes_of_params(params: nn.ModelParams | Mapping[str, np.ndarray]) -> int:
    """4 bytes per float32 scalar plus a 16-byte header per tensor."""
    tensors = params.tensors if isinstance(params, nn.ModelParams) else params
    return sum(4 * int(np.asarray(t).size) + TENSOR_HEADER_BYTES for t in tensors.values())


@dataclass
class RoundTraffic:
    up_params: int = 0
    up_protos: int = 0
    down_params: int = 0
    down_protos: int = 0

    def __post_init__(self):
        if min(self.up_params, self.up_protos, self.down_params, self.down_protos) < 0:
            raise ValueError("byte counters must be nonnegative")

    @property
    def up(self) -> int:
        return self.up_params + self.up_protos

    @property
    def down(self) -> int:
        return self.down_params + self.down_protos

    def without_prototypes(self) -> "RoundTraffic":
        return RoundTraffic(self.up_params, 0, self.down_params, 0)


@dataclass
class TrafficLedger:
    """Per-round traffic, in round order."""

    rounds: list[RoundTraffic] = field(default_factory=list)

    def record(self, delta: RoundTraffic) -> None:
        self.rounds.append(delta)

    def __len__(self) -> int:
        return len(self.rounds)

    def cumulative(self) -> list[tuple[int, int]]:
        out, up, down = [], 0, 0
        for r in self.rounds:
            up += r.up
            down += r.down
            out.append((up, down))
        return out

    def totals(self) -> dict[str, int]:
        keys = ("up_params", "up_protos", "down_params", "down_protos")
        tot = {k: sum(getattr(r, k) for r in self.rounds) for k in keys}
        tot["up"] = tot["up_params"] + tot["up_protos"]
        tot["down"] = tot["down_params"] + tot["down_protos"]
        tot["total"] = tot["up"] + tot["down"]
        return tot

    def without_prototypes(self) -> "TrafficLedger":
        """The same run as seen by plain FedAvg, which never ships prototypes."""
        return TrafficLedger([r.without_prototypes() for r in self.rounds])


@dataclass
class RoundRecord:
    round: int
    acc_local: float | None = None
    acc_fedavg: float | None = None
    acc_proto: float | None = None
    bytes_up: int = 0
    bytes_down: int = 0
    wall_s: float | None = None

    def __post_init__(self):
        for name in ("acc_local", "acc_fedavg", "acc_proto"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


def predict_classifier(params: nn.ModelParams, images: np.ndarray) -> np.ndarray:
    preds = [
        np.argmax(nn.forward(params, images[i:i + EVAL_BATCH]), axis=1)
        for i in range(0, len(images), EVAL_BATCH)
    ]
    return np.concatenate(preds)


def evaluate_classifier(params: nn.ModelParams, test: Dataset) -> float:
    """Top-1 accuracy of the fc2 head; argmax ties resolve to the lowest class."""
    return float(np.mean(predict_classifier(params, test.images) == test.labels))


def prototype_accuracy(emb: np.ndarray, labels: np.ndarray, globals_: PrototypeSet) -> float:
    labels = np.asarray(labels)
    missing = ~np.isin(labels, globals_.classes)
    if missing.any():
        absent = sorted(set(labels[missing].tolist()))
        log.warning(
            "%d test samples belong to classes without a global prototype %s; counted wrong",
            int(missing.sum()), absent,
        )
    return float(np.mean(nearest_prototype(emb, globals_) == labels))


def evaluate_prototype(params: nn.ModelParams, globals_: PrototypeSet, test: Dataset) -> float:
    """Top-1 accuracy of nearest-prototype prediction on ``test``."""
    return prototype_accuracy(embed_all(params, test.images, EVAL_BATCH), test.labels, globals_)


def evaluate_local_baseline(clients: Sequence, test: Dataset) -> float:
    """Unweighted mean over clients of each client's own classifier accuracy."""
    if not clients:
        raise ValueError("no clients to evaluate")
    return float(np.mean([evaluate_classifier(c.params, test) for c in clients]))
