"""Configuration, data preparation and shared loops for SL/FL training runs.

Batch orders and dropout masks are keyed by integers only, so runs are
reproducible bit for bit:

* client ``u`` in round ``r``, epoch ``e`` visits its shard in the order
  ``default_rng([seed, 7, r, e, u]).permutation(n_u)``;
* dropout for client ``u`` uses ``seed=(seed, u)`` and the client's running
  batch counter as ``step``.

Centralised training is client 0 holding the whole training split, which is
what makes the one-client equivalence checks exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .data import (
    DEFAULT_BIAS,
    DEFAULT_BLOCK,
    DEFAULT_SIGNAL,
    Dataset,
    SplitSpec,
    downsample_majority,
    generate,
    normalize,
    shard,
    stratified_split,
)
from .errors import DomainError
from .metrics import classification_metrics

__all__ = [
    "DataConfig",
    "TrainConfig",
    "PreparedData",
    "METRIC_COLUMNS",
    "prepare_data",
    "batch_order",
    "evaluate",
    "centralized_train",
    "latency_of",
    "weighted_average",
]

METRIC_COLUMNS = ("round", "loss", "acc", "precision", "recall", "f1",
                  "avg_client_sec", "total_client_tflops", "bytes_up", "bytes_down")


@dataclass(frozen=True)
class DataConfig:
    n_samples: int = 4000
    height: int = 32
    width: int = 32
    minority_fraction: float = 0.1444
    signal: float = DEFAULT_SIGNAL
    block: int = DEFAULT_BLOCK
    bias: float = DEFAULT_BIAS
    downsample_ratio: float = 0.5
    fractions: tuple = (0.7, 0.15, 0.15)
    shard_mode: str = "stratified"
    dirichlet_beta: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        SplitSpec(self.fractions)
        if self.shard_mode not in ("stratified", "dirichlet"):
            raise DomainError(f"unknown shard mode {self.shard_mode!r}")
        if self.n_samples < 10 or not 0 < self.minority_fraction <= 0.5:
            raise DomainError("need n_samples >= 10 and minority_fraction in (0, 0.5]")


@dataclass(frozen=True)
class TrainConfig:
    """Settings shared by the SL engine and the FL baselines.

    ``uplink_rate`` and ``downlink_rate`` (bits/s) turn payload bytes into
    seconds; ``client_flops_per_sec`` turns client FLOPs into compute seconds.
    """

    clients: int = 4
    rounds: int = 25
    local_epochs: int = 2
    batch_size: int = 32
    cut: int = 12
    seed: int = 0
    lr: float = 1e-3
    optimizer: str = "adam"
    schedule: str = "round_robin"
    target_accuracy: Optional[float] = None
    element_bytes: int = 4
    uplink_rate: float = 1e6
    downlink_rate: float = 1e7
    client_flops_per_sec: float = 1e9
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.clients < 1 or self.rounds < 0 or self.local_epochs < 0 or self.batch_size < 1:
            raise DomainError("need clients >= 1, rounds >= 0, local_epochs >= 0, batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("round_robin", "random"):
            raise DomainError(f"unknown schedule {self.schedule!r}")
        if not (self.uplink_rate > 0 and self.downlink_rate > 0 and self.client_flops_per_sec > 0):
            raise DomainError("rates and client_flops_per_sec must be > 0")


@dataclass
class PreparedData:
    shards: list
    train: Dataset
    val: Dataset
    test: Dataset


def prepare_data(cfg: TrainConfig) -> PreparedData:
    """Generate, rebalance, split, normalise and shard the synthetic task."""
    d = cfg.data
    raw = generate(d.n_samples, d.height, d.width, d.minority_fraction, seed=cfg.seed,
                   signal=d.signal, block=d.block, bias=d.bias)
    balanced = downsample_majority(raw, d.downsample_ratio, seed=cfg.seed)
    train, val, test = stratified_split(balanced, SplitSpec(tuple(d.fractions)), seed=cfg.seed)
    (train, val, test), _ = normalize(train, val, test)
    shards = shard(train, cfg.clients, seed=cfg.seed, mode=d.shard_mode, beta=d.dirichlet_beta)
    return PreparedData(shards=shards, train=train, val=val, test=test)


def batch_order(n: int, batch_size: int, seed: int, rnd: int, epoch: int, client: int) -> list:
    perm = np.random.default_rng([seed, 7, rnd, epoch, client]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def latency_of(payload_bytes: float, rate: float) -> float:
    """Seconds to move ``payload_bytes`` at ``rate`` bits/s."""
    if not rate > 0:
        raise DomainError("rate must be > 0")
    return payload_bytes * 8.0 / rate


def evaluate(spec: nn.ModelSpec, params, ds: Dataset, batch: int = 256):
    """Classification metrics of the full model on ``ds`` (dropout off)."""
    preds = []
    for i in range(0, len(ds), batch):
        _, logits = nn.forward(spec, params, ds.images[i:i + batch], train=False)
        preds.append(np.argmax(logits, axis=1))
    return classification_metrics(np.concatenate(preds), ds.labels)


def _apply(params, grads, opt, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return nn.sgd_step(params, grads, cfg.lr), opt
    return nn.adam_step(params, grads, opt)


def centralized_train(spec: nn.ModelSpec, params, ds: Dataset, cfg: TrainConfig,
                      epochs_per_round: Optional[int] = None) -> list:
    """Plain minibatch training on one dataset; returns the parameters after each round.

    Uses the same batch orders and dropout keys as client 0 of the SL/FL
    engines, so it is the reference for one-client equivalence.
    """
    epochs = cfg.local_epochs if epochs_per_round is None else epochs_per_round
    opt = nn.adam_init(params, lr=cfg.lr) if cfg.optimizer == "adam" else None
    step = 0
    history = []
    for rnd in range(cfg.rounds):
        for epoch in range(epochs):
            for idx in batch_order(len(ds), cfg.batch_size, cfg.seed, rnd, epoch, 0):
                trace, logits = nn.forward(spec, params, ds.images[idx], True,
                                           seed=(cfg.seed, 0), step=step)
                _, dlogits = nn.loss_and_grad(logits, ds.labels[idx])
                grads, _ = nn.backward(spec, params, trace, dlogits)
                params, opt = _apply(params, grads, opt, cfg)
                step += 1
        history.append(params)
    return history


def weighted_average(param_sets: Sequence, weights: Sequence[float]) -> list:
    """Element-wise ``sum_u w_u * params_u`` accumulated in list order."""
    weights = [float(w) for w in weights]
    total = sum(weights)
    if not total > 0:
        raise DomainError("aggregation weights sum to zero")
    weights = [w / total for w in weights]
    out = []
    for layers in zip(*param_sets):
        arrays = []
        for tensors in zip(*layers):
            acc = weights[0] * tensors[0]
            for w, t in zip(weights[1:], tensors[1:]):
                acc = acc + w * t
            arrays.append(acc)
        out.append(tuple(arrays))
    return out
