"""Client/server round logic for in-process federated training."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import nn
from .data import ClientShard, Dataset
from .errors import InvalidInputError, ProtocolError
from .metrics import RoundTraffic, bytes_of_params
from .prototypes import (
    PrototypeSet,
    aggregate_global_prototypes,
    ordered_sum,
    prototypes_from_local_data,
)


@dataclass(frozen=True)
class RoundConfig:
    batch_size: int = 8
    local_epochs: int = 1
    lr: float = 0.01
    rounds: int = 100
    n_clients: int = 20

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.local_epochs < 1:
            raise InvalidInputError("local_epochs must be >= 1")
        if self.lr < 0:
            raise InvalidInputError("lr must be >= 0")
        if self.rounds < 1:
            raise InvalidInputError("rounds must be >= 1")
        if self.n_clients < 1:
            raise InvalidInputError("n_clients must be >= 1")


@dataclass
class ClientState:
    """One simulated client. ``data`` holds only the client's own samples."""

    client_id: int
    shard: ClientShard
    data: Dataset
    params: nn.ModelParams
    seed: int = 0
    round: int = 0  # index of the next round this client will run

    def rng(self, round_index: int | None = None) -> np.random.Generator:
        r = self.round if round_index is None else round_index
        return np.random.default_rng([self.seed, self.client_id, r])


def make_clients(
    pool: Dataset, shards: Sequence[ClientShard], init: nn.ModelParams, seed: int
) -> list[ClientState]:
    return [ClientState(s.client_id, s, pool.take(s.indices), init, seed) for s in shards]


@dataclass
class ServerState:
    params: nn.ModelParams
    total_rounds: int
    round: int = 0
    prototypes: PrototypeSet | None = None

    def __post_init__(self):
        if not 0 <= self.round <= self.total_rounds:
            raise ProtocolError(f"round {self.round} outside [0, {self.total_rounds}]")
        if self.prototypes is not None and self.round != self.total_rounds:
            raise ProtocolError("prototypes may only exist after the final round")


def local_update(
    state: ClientState, global_params: nn.ModelParams, cfg: RoundConfig
) -> nn.ModelParams:
    """E epochs of mini-batch SGD from ``global_params`` on the client's data.

    Batches come from a fresh permutation each epoch; the final partial
    batch is kept. The generator is derived from (seed, client id, round).
    """
    n = state.shard.size
    if n == 0:
        raise ProtocolError(f"client {state.client_id} has no data")
    global_params.check_congruent(state.params)
    rng = state.rng()
    images, labels = state.data.images, state.data.labels
    params = global_params
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = nn.loss_and_grads(params, images[idx], labels[idx])
            params = nn.sgd_step(params, grads, cfg.lr)
    return params


def fedavg_aggregate(updates: Sequence[tuple[nn.ModelParams, int]]) -> nn.ModelParams:
    """Size-weighted parameter mean, sum_i D_i * w_i / sum_i D_i."""
    if not updates:
        raise InvalidInputError("no updates to aggregate")
    first = updates[0][0]
    for p, size in updates:
        first.check_congruent(p)
        if size < 1:
            raise InvalidInputError(f"client size must be >= 1, got {size}")
    total = sum(int(size) for _, size in updates)
    out = {}
    for name in nn.PARAM_NAMES:
        # D_i * w_i is exact in float64; the sorted sum makes order irrelevant
        stack = np.stack([np.float64(size) * p.tensors[name].astype(np.float64) for p, size in updates])
        out[name] = (ordered_sum(stack) / total).astype(first.dtype)
    return nn.ModelParams(first.arch, out)


def _map_clients(fn: Callable, clients: Sequence[ClientState], workers: int) -> list:
    if workers <= 1 or len(clients) <= 1:
        return [fn(c) for c in clients]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, clients))


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    cfg: RoundConfig,
    is_final: bool,
    *,
    with_prototypes: bool = True,
    workers: int = 1,
) -> tuple[ServerState, RoundTraffic]:
    """Broadcast, local training, aggregation; on the final round also prototypes.

    Each client's ``params`` and ``round`` are advanced in place. On the final
    round the aggregated model (and global prototypes) are sent back to every
    client, which is charged as a second downlink.
    """
    if server.round >= server.total_rounds:
        raise ProtocolError(f"server already finished {server.total_rounds} rounds")
    if is_final != (server.round + 1 == server.total_rounds):
        raise ProtocolError(f"is_final={is_final} at round {server.round + 1}/{server.total_rounds}")
    if not clients:
        raise ProtocolError("no clients")

    model_bytes = bytes_of_params(server.params)
    traffic = RoundTraffic(down_params=model_bytes * len(clients))

    def work(c: ClientState):
        params = local_update(c, server.params, cfg)
        protos = None
        if is_final and with_prototypes:
            # computed on the post-update local model, before the final aggregate exists
            protos = prototypes_from_local_data(params, c.data, c.client_id)
        return params, protos

    results = _map_clients(work, clients, workers)
    for c, (params, _) in zip(clients, results):
        c.params = params
        c.round += 1

    traffic.up_params = sum(bytes_of_params(p) for p, _ in results)
    new_params = fedavg_aggregate([(p, c.shard.size) for c, (p, _) in zip(clients, results)])

    globals_ = None
    if is_final:
        traffic.down_params += bytes_of_params(new_params) * len(clients)
        if with_prototypes:
            locals_ = [p for _, p in results]
            traffic.up_protos = sum(len(p.to_bytes()) for p in locals_)
            globals_ = aggregate_global_prototypes(locals_)
            traffic.down_protos = len(globals_.to_bytes()) * len(clients)

    return replace(server, params=new_params, round=server.round + 1, prototypes=globals_), traffic


def run_local_round(clients: Sequence[ClientState], cfg: RoundConfig, *, workers: int = 1) -> None:
    """Local-only baseline: each client continues from its own model; no traffic."""
    results = _map_clients(lambda c: local_update(c, c.params, cfg), clients, workers)
    for c, params in zip(clients, results):
        c.params = params
        c.round += 1
