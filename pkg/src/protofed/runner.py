"""Experiment driver: partition once, train the strategies side by side, write results."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .config import ExperimentConfig
from .data import Dataset, PartitionSpec, dirichlet_partition, load_idx, partition_digest, subsample
from .errors import ConfigError
from .metrics import (
    RoundRecord,
    TrafficLedger,
    evaluate_classifier,
    evaluate_local_baseline,
    evaluate_prototype,
)
from .prototypes import PrototypeSet, aggregate_global_prototypes, prototypes_from_local_data
from .protocol import RoundConfig, ServerState, make_clients, run_local_round, run_round

log = logging.getLogger(__name__)

CSV_HEADER = ("round", "acc_local", "acc_fedavg", "acc_proto", "bytes_up", "bytes_down", "wall_s")
THREADS_ENV = "PROTOFED_THREADS"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer %s=%r", THREADS_ENV, raw)
        return 1


@dataclass
class RunResult:
    records: list[RoundRecord]
    summary: dict
    prototypes: PrototypeSet | None = None
    ledger: TrafficLedger = field(default_factory=TrafficLedger)
    params: nn.ModelParams | None = None  # final global model (None without federated strategies)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    paths = cfg.data_paths()
    train = load_idx(paths["train_images"], paths["train_labels"])
    test = load_idx(paths["test_images"], paths["test_labels"])
    if cfg.pool_size > len(train):
        raise ConfigError("pool_size", f"{cfg.pool_size} exceeds the {len(train)} training samples")
    if cfg.test_size and cfg.test_size < len(test):
        test = test.take(np.arange(cfg.test_size))
    return train, test


def _eval_round(t: int, cfg: ExperimentConfig) -> bool:
    return t == cfg.rounds or t % cfg.eval_every == 0


def run_experiment(
    cfg: ExperimentConfig,
    data: tuple[Dataset, Dataset] | None = None,
    *,
    seed: int | None = None,
    workers: int | None = None,
) -> RunResult:
    """Run every selected strategy for one seed on a shared partition and init."""
    seed = cfg.seed if seed is None else seed
    workers = worker_count() if workers is None else workers
    train, test = data if data is not None else load_datasets(cfg)
    strategies = set(cfg.strategies)
    federated = bool(strategies & {"fedavg", "protofed"})

    pool = subsample(train, cfg.pool_size, seed)
    spec = PartitionSpec(cfg.n_clients, cfg.alpha, cfg.pool_size, seed)
    shards = dirichlet_partition(pool.labels, spec, n_classes=pool.class_count)
    absent = [j for j, n in enumerate(pool.class_histogram()) if n == 0]
    if absent:
        log.warning("classes %s are absent from every client and cannot be predicted", absent)

    init = nn.init_params(nn.ModelArch(n_classes=pool.class_count), seed)
    rcfg = RoundConfig(cfg.batch_size, cfg.local_epochs, cfg.lr, cfg.rounds, cfg.n_clients)

    fed_clients = make_clients(pool, shards, init, seed) if federated else []
    local_clients = make_clients(pool, shards, init, seed) if "local" in strategies else []
    server = ServerState(init, cfg.rounds)
    ledger = TrafficLedger()
    records: list[RoundRecord] = []
    started = time.perf_counter()

    for t in range(1, cfg.rounds + 1):
        is_final = t == cfg.rounds
        rec = RoundRecord(t)
        if federated:
            server, traffic = run_round(
                server, fed_clients, rcfg, is_final,
                with_prototypes="protofed" in strategies, workers=workers,
            )
            ledger.record(traffic)
        if local_clients:
            run_local_round(local_clients, rcfg, workers=workers)

        if _eval_round(t, cfg):
            if "fedavg" in strategies:
                rec.acc_fedavg = evaluate_classifier(server.params, test)
            if "protofed" in strategies:
                globals_ = server.prototypes
                if globals_ is None:
                    # curve point only: prototypes built out of band, never charged to the ledger
                    globals_ = aggregate_global_prototypes(
                        [prototypes_from_local_data(c.params, c.data, c.client_id) for c in fed_clients]
                    )
                rec.acc_proto = evaluate_prototype(server.params, globals_, test)
            if local_clients:
                rec.acc_local = evaluate_local_baseline(local_clients, test)

        shown = ledger if "protofed" in strategies else ledger.without_prototypes()
        if len(shown):
            rec.bytes_up, rec.bytes_down = shown.cumulative()[-1]
        if cfg.wall_clock:
            rec.wall_s = time.perf_counter() - started
        records.append(rec)
        log.info(
            "seed %d round %d/%d local=%s fedavg=%s proto=%s",
            seed, t, cfg.rounds, rec.acc_local, rec.acc_fedavg, rec.acc_proto,
        )

    last = records[-1]
    summary = {
        "seed": seed,
        "final_accuracy": {
            "local": last.acc_local,
            "fedavg": last.acc_fedavg,
            "protofed": last.acc_proto,
        },
        "bytes": {
            "local": TrafficLedger().totals(),
            "fedavg": ledger.without_prototypes().totals() if federated else None,
            "protofed": ledger.totals() if "protofed" in strategies else None,
        },
        "partition_sha256": partition_digest(shards),
        "init_sha256": init.digest(),
        "shard_sizes": [s.size for s in shards],
        "pool_class_counts": pool.class_histogram().tolist(),
        "absent_classes": absent,
        "prototype_classes": server.prototypes.classes if server.prototypes is not None else None,
        "config": cfg.as_dict(),
    }
    for name in ("local", "fedavg", "protofed"):
        if name not in strategies:
            summary["final_accuracy"][name] = None
            summary["bytes"][name] = None
    summary["wall_s_total"] = round(time.perf_counter() - started, 3)
    return RunResult(records, summary, server.prototypes, ledger, server.params if federated else None)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rounds_csv(records: list[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow([
            r.round, _fmt(r.acc_local), _fmt(r.acc_fedavg), _fmt(r.acc_proto),
            r.bytes_up, r.bytes_down, "" if r.wall_s is None else f"{r.wall_s:.3f}",
        ])
    return buf.getvalue()


def _atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def preflight(out_dir) -> Path:
    """Create ``out_dir`` and prove it is writable before any training."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(dir=out, prefix=".probe."):
        pass
    return out


def emit_outputs(records: list[RoundRecord], summary: dict, out_dir, prototypes: PrototypeSet | None = None) -> Path:
    """Write rounds.csv, summary.json and (if present) prototypes.bin."""
    if not records:
        raise ValueError("no round records to write")
    out = preflight(out_dir)
    _atomic_write(out / "rounds.csv", rounds_csv(records).encode())
    _atomic_write(out / "summary.json", (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode())
    if prototypes is not None:
        _atomic_write(out / "prototypes.bin", prototypes.to_bytes())
    return out


def aggregate_summaries(summaries: list[dict]) -> dict:
    """Mean/min/max of final accuracies across seeds."""
    out = {"seeds": [s["seed"] for s in summaries], "final_accuracy": {}}
    for name in ("local", "fedavg", "protofed"):
        vals = [s["final_accuracy"][name] for s in summaries if s["final_accuracy"][name] is not None]
        out["final_accuracy"][name] = (
            {"mean": statistics.fmean(vals), "min": min(vals), "max": max(vals), "values": vals}
            if vals else None
        )
    out["runs"] = summaries
    return out


def run(cfg: ExperimentConfig) -> dict:
    """Full invocation: pre-flight, one run per seed, outputs on disk."""
    out = preflight(cfg.out_dir)
    data = load_datasets(cfg)
    seeds = cfg.run_seeds()
    summaries = []
    for s in seeds:
        result = run_experiment(cfg, data, seed=s)
        target = out if len(seeds) == 1 else out / f"seed_{s}"
        emit_outputs(result.records, result.summary, target, result.prototypes)
        summaries.append(result.summary)
    if len(seeds) == 1:
        return summaries[0]
    combined = aggregate_summaries(summaries)
    _atomic_write(out / "summary.json", (json.dumps(combined, indent=2, sort_keys=True) + "\n").encode())
    return combined
