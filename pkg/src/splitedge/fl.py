"""Federated-learning baselines on the same model, shards and accounting.

* FedAvg: clients train the full model locally; the server takes the
  shard-size-weighted mean.
* FedProx: as FedAvg with ``(mu/2) ||w - w_global||^2`` added to each local
  loss.
* FedOpt: the server treats ``w_global - mean`` as a gradient and applies
  Adam with ``server_lr``.

Local optimizers start fresh every round. Each client uploads and downloads
the full model once per round.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .errors import DomainError
from .sl import TrainingMetrics
from .training import (
    METRIC_COLUMNS,
    PreparedData,
    TrainConfig,
    _apply,
    batch_order,
    evaluate,
    latency_of,
    prepare_data,
    weighted_average,
)

__all__ = ["FedConfig", "ClientUpdate", "FLClient", "local_train", "aggregate",
           "run_fl_training", "FL_COLUMNS"]

VARIANTS = ("fedavg", "fedprox", "fedopt")
FL_COLUMNS = ("variant",) + METRIC_COLUMNS


@dataclass(frozen=True)
class FedConfig:
    variant: str = "fedavg"
    prox_mu: float = 0.01
    server_lr: float = 1e-2
    server_beta1: float = 0.9
    server_beta2: float = 0.999
    server_eps: float = 1e-8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown FL variant {self.variant!r}")
        if self.prox_mu < 0:
            raise DomainError("prox_mu must be >= 0")


@dataclass
class ClientUpdate:
    client_id: int
    params: list
    samples: int
    payload_bytes: int
    skipped: bool = False
    loss_sum: float = 0.0  # sum of per-sample training losses over local batches
    seen: int = 0


@dataclass
class FLClient:
    client_id: int
    data: object
    seconds: float = 0.0
    flops: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    steps: int = 0


def local_train(client: FLClient, global_params, model: nn.ModelSpec, cfg: TrainConfig,
                fed: FedConfig, rnd: int) -> ClientUpdate:
    """``cfg.local_epochs`` epochs of minibatch training starting from ``global_params``.

    A client with an empty shard is skipped: it returns the global parameters
    with ``skipped=True`` and a :class:`RuntimeWarning` is issued.
    """
    payload = 2 * model.param_count * cfg.element_bytes
    if len(client.data) == 0:
        warnings.warn(f"client {client.client_id} has an empty shard; skipped this round",
                      RuntimeWarning, stacklevel=2)
        return ClientUpdate(client.client_id, list(global_params), 0, 0, skipped=True)
    params = list(global_params)
    opt = nn.adam_init(params, lr=cfg.lr) if cfg.optimizer == "adam" else None
    per_sample = sum(f.total for f in nn.count_flops(model))
    mu = fed.prox_mu if fed.variant == "fedprox" else 0.0
    loss_sum, seen = 0.0, 0
    for epoch in range(cfg.local_epochs):
        for idx in batch_order(len(client.data), cfg.batch_size, cfg.seed, rnd, epoch,
                               client.client_id):
            trace, logits = nn.forward(model, params, client.data.images[idx], True,
                                       seed=(cfg.seed, client.client_id), step=client.steps)
            loss, dlogits = nn.loss_and_grad(logits, client.data.labels[idx])
            loss_sum += loss * len(idx)
            seen += len(idx)
            grads, _ = nn.backward(model, params, trace, dlogits)
            if mu > 0:
                grads = [tuple(g + mu * (w - w0) for g, w, w0 in zip(gl, wl, w0l))
                         for gl, wl, w0l in zip(grads, params, global_params)]
            params, opt = _apply(params, grads, opt, cfg)
            client.steps += 1
            client.flops += len(idx) * per_sample
            client.seconds += len(idx) * per_sample / cfg.client_flops_per_sec
    return ClientUpdate(client.client_id, params, len(client.data), payload,
                        loss_sum=loss_sum, seen=seen)


def aggregate(updates, global_params, fed: FedConfig, server_opt=None):
    """New global parameters (and server optimizer state for FedOpt)."""
    live = [u for u in updates if not u.skipped]
    if not live:
        raise DomainError("no client updates to aggregate")
    mean = weighted_average([u.params for u in live], [u.samples for u in live])
    if fed.variant != "fedopt":
        return mean, server_opt
    if server_opt is None:
        server_opt = nn.adam_init(global_params, lr=fed.server_lr, beta1=fed.server_beta1,
                                  beta2=fed.server_beta2, eps=fed.server_eps)
    pseudo = [tuple(g - m for g, m in zip(gl, ml)) for gl, ml in zip(global_params, mean)]
    return nn.adam_step(global_params, pseudo, server_opt)


def run_fl_training(cfg: TrainConfig, fed: FedConfig = FedConfig(),
                    model: Optional[nn.ModelSpec] = None, data: Optional[PreparedData] = None,
                    params=None):
    """FL counterpart of :func:`splitedge.sl.run_training`; rows carry a ``variant`` column."""
    model = nn.desk_cnn() if model is None else model
    data = prepare_data(cfg) if data is None else data
    params = nn.init_params(model, cfg.seed) if params is None else list(params)
    clients = [FLClient(u, data.shards[u]) for u in range(cfg.clients)]
    model_bytes = model.param_count * cfg.element_bytes
    metrics = TrainingMetrics(columns=FL_COLUMNS)
    server_opt = None
    for rnd in range(cfg.rounds):
        updates = []
        for c in clients:
            updates.append(local_train(c, params, model, cfg, fed, rnd))
            c.bytes_down += model_bytes
            c.bytes_up += model_bytes
            c.seconds += (latency_of(model_bytes, cfg.downlink_rate)
                          + latency_of(model_bytes, cfg.uplink_rate))
        params, server_opt = aggregate(updates, params, fed, server_opt)
        m = evaluate(model, params, data.val)
        seen = sum(u.seen for u in updates)
        loss = sum(u.loss_sum for u in updates) / seen if seen else 0.0
        metrics.rows.append({
            "variant": fed.variant, "round": rnd + 1, "loss": loss,
            "acc": m.accuracy, "precision": m.precision, "recall": m.recall, "f1": m.f1,
            "avg_client_sec": float(np.mean([c.seconds for c in clients])),
            "total_client_tflops": sum(c.flops for c in clients) / 1e12,
            "bytes_up": sum(c.bytes_up for c in clients),
            "bytes_down": sum(c.bytes_down for c in clients),
        })
        if cfg.target_accuracy is not None and m.accuracy >= cfg.target_accuracy:
            break
    return metrics, params, clients
