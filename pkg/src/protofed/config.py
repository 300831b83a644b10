"""Experiment configuration: flat ``key = value`` files plus flag overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import ConfigError

STRATEGIES = ("local", "fedavg", "protofed")
DATASETS = ("mnist", "fashion-mnist")
DATA_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    data_dir: str | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    n_clients: int = 20
    alpha: float = 0.1
    pool_size: int = 5000
    batch_size: int = 8
    local_epochs: int = 1
    lr: float = 0.01
    rounds: int = 100
    seed: int = 0
    seeds: list[int] = field(default_factory=list)
    strategies: list[str] = field(default_factory=lambda: list(STRATEGIES))
    out_dir: str = "results"
    eval_every: int = 10
    test_size: int = 0  # 0 = the full test split
    wall_clock: bool = False

    def validate(self) -> "ExperimentConfig":
        if self.dataset not in DATASETS:
            raise ConfigError("dataset", f"must be one of {', '.join(DATASETS)}")
        positive_ints = ("n_clients", "pool_size", "batch_size", "local_epochs", "rounds", "eval_every")
        for key in positive_ints:
            if getattr(self, key) < 1:
                raise ConfigError(key, f"must be >= 1, got {getattr(self, key)}")
        if not self.alpha > 0:
            raise ConfigError("alpha", f"must be > 0, got {self.alpha}")
        if not self.lr > 0:
            raise ConfigError("lr", f"must be > 0, got {self.lr}")
        if self.test_size < 0:
            raise ConfigError("test_size", "must be >= 0")
        if self.n_clients > self.pool_size:
            raise ConfigError("n_clients", "cannot exceed pool_size")
        if not self.strategies:
            raise ConfigError("strategies", "at least one strategy is required")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError("strategies", f"unknown strategy {s!r}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds", "duplicate seed")
        return self

    def data_paths(self) -> dict[str, Path]:
        """Resolve the four IDX paths, failing on the first one missing."""
        out = {}
        for key, stem in DATA_FILES.items():
            value = getattr(self, key)
            if value is None and self.data_dir is not None:
                base = Path(self.data_dir) / stem
                value = base if base.exists() else base.with_name(stem + ".gz")
            if value is None:
                raise ConfigError(key, "dataset path is required (set it or data_dir)")
            path = Path(value)
            if not path.is_file():
                raise ConfigError(key, f"no such file: {path}")
            out[key] = path
        return out

    def run_seeds(self) -> list[int]:
        return list(self.seeds) if self.seeds else [self.seed]

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "list[int]":
            return [int(x) for x in raw.split(",") if x.strip()]
        if kind == "list[str]":
            return [x.strip() for x in raw.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind}") from None
    return raw or None


def read_config_file(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def parse_config(path=None, overrides: Mapping[str, object] | None = None) -> ExperimentConfig:
    """Build a validated config: defaults < file values < overrides."""
    merged: dict[str, object] = {}
    if path is not None:
        merged.update(read_config_file(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    kwargs = {}
    for key, value in merged.items():
        if key not in _FIELDS:
            raise ConfigError(key, "unknown configuration key")
        kwargs[key] = _convert(key, value) if isinstance(value, str) else value
    return ExperimentConfig(**kwargs).validate()
