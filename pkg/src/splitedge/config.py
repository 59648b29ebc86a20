"""TOML experiment configuration.

A file has up to six tables, all optional::

    [experiment]   seed, out_dir, parallel
    [data]         synthetic dataset and preparation settings
    [train]        SL/FL training settings
    [fl]           FL variants and their hyperparameters
    [sweep]        cut positions and client counts to sweep
    [allocator]    wireless system and the allocation sweeps

Unknown tables or keys raise :class:`ConfigError` so typos never pass
silently. ``dumps(loads(text))`` reproduces an equivalent file and
``loads(dumps(cfg)) == cfg``.
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .errors import ConfigError, DomainError
from .training import DataConfig, TrainConfig

__all__ = [
    "ExperimentSection",
    "TrainSection",
    "FLSection",
    "SweepSection",
    "AllocatorSection",
    "ExperimentConfig",
    "loads",
    "load",
    "dumps",
]


@dataclass(frozen=True)
class ExperimentSection:
    seed: int = 0
    out_dir: str = "results"
    parallel: int = 1


@dataclass(frozen=True)
class TrainSection:
    clients: int = 4
    rounds: int = 25
    local_epochs: int = 2
    batch_size: int = 32
    cut: int = 12
    lr: float = 1e-3
    optimizer: str = "adam"
    schedule: str = "round_robin"
    target_accuracy: float = 0.0  # 0 disables early stopping
    element_bytes: int = 4
    uplink_rate: float = 1e6
    downlink_rate: float = 1e7
    client_flops_per_sec: float = 1e9


@dataclass(frozen=True)
class FLSection:
    variants: tuple = ("fedavg", "fedprox", "fedopt")
    prox_mu: float = 0.01
    server_lr: float = 1e-2


@dataclass(frozen=True)
class SweepSection:
    cuts: tuple = (4, 8, 12)
    client_counts: tuple = (2, 4, 6, 8, 12, 16)


@dataclass(frozen=True)
class AllocatorSection:
    device_count: int = 50
    region_radius: float = 250.0
    noise_psd_dbm: float = -174.0
    capacitance: float = 1e-28
    local_iters: int = 10
    global_rounds: int = 400
    total_bandwidth_mhz: float = 20.0
    power_min_w: float = 1e-3
    power_max_dbm: float = 12.0
    freq_min_ghz: float = 0.2
    freq_max_ghz: float = 2.0
    cycles_per_sample: float = 2e4
    dataset_size: int = 500
    payload_kbits: float = 28.1
    weight_pairs: tuple = ((0.2, 0.8), (0.5, 0.5), (0.8, 0.2))
    power_max_dbm_sweep: tuple = (0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0)
    freq_max_ghz_sweep: tuple = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
    bandwidth_mhz_sweep: tuple = (5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    outer_tol: float = 1e-4
    inner_tol: float = 1e-4
    max_outer: int = 200


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainSection = field(default_factory=TrainSection)
    fl: FLSection = field(default_factory=FLSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    allocator: AllocatorSection = field(default_factory=AllocatorSection)

    def train_config(self, **overrides) -> TrainConfig:
        """The :class:`TrainConfig` these settings describe."""
        kw = dataclasses.asdict(self.train)
        kw["target_accuracy"] = kw["target_accuracy"] or None
        kw.update(seed=self.experiment.seed, data=self.data)
        kw.update(overrides)
        return TrainConfig(**kw)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, experiment=dataclasses.replace(self.experiment,
                                                                        seed=seed))

    def with_out_dir(self, out_dir) -> "ExperimentConfig":
        return dataclasses.replace(self, experiment=dataclasses.replace(self.experiment,
                                                                        out_dir=str(out_dir)))

    def with_parallel(self, n: int) -> "ExperimentConfig":
        return dataclasses.replace(self, experiment=dataclasses.replace(self.experiment,
                                                                        parallel=int(n)))


def _coerce(name: str, default: Any, value: Any):
    """Convert a TOML value to the type of ``default`` or fail."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected an array")
        proto = default[0] if default else value[0] if value else None
        return tuple(_coerce(f"{name}[{i}]", proto, v) for i, v in enumerate(value))
    raise ConfigError(f"{name}: unsupported setting type")


def _section(cls, table: Any, name: str):
    if not isinstance(table, dict):
        raise ConfigError(f"[{name}] must be a table")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(unknown)}")
    kw = {k: _coerce(f"{name}.{k}", getattr(defaults, k), v) for k, v in table.items()}
    try:
        return cls(**kw)
    except DomainError as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


_SECTIONS = {f.name: f for f in fields(ExperimentConfig)}
_CLASSES = {
    "experiment": ExperimentSection,
    "data": DataConfig,
    "train": TrainSection,
    "fl": FLSection,
    "sweep": SweepSection,
    "allocator": AllocatorSection,
}


def _validate(cfg: ExperimentConfig) -> None:
    for a, b in cfg.allocator.weight_pairs:
        if not (0.0 <= a <= 1.0 and abs(a + b - 1.0) < 1e-9):
            raise ConfigError(f"allocator.weight_pairs: ({a}, {b}) must be non-negative "
                              "and sum to 1")
    for v in cfg.fl.variants:
        if v not in ("fedavg", "fedprox", "fedopt"):
            raise ConfigError(f"fl.variants: unknown variant {v!r}")
    if cfg.experiment.parallel < 1:
        raise ConfigError("experiment.parallel must be >= 1")
    if any(c < 1 for c in cfg.sweep.client_counts):
        raise ConfigError("sweep.client_counts must be >= 1")
    try:
        cfg.train_config()
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc


def loads(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown tables: {', '.join(unknown)}")
    kw = {name: _section(_CLASSES[name], doc[name], name) for name in doc}
    cfg = ExperimentConfig(**kw)
    _validate(cfg)
    return cfg


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def dumps(cfg: ExperimentConfig) -> str:
    doc = {}
    for name in _SECTIONS:
        section = getattr(cfg, name)
        doc[name] = {f.name: _plain(getattr(section, f.name)) for f in fields(section)}
    return tomli_w.dumps(doc)
