"""Split-learning protocol simulation.

Each client holds the layers before the cut; one server holds the rest. Per
batch the client sends activations and labels (a :class:`SmashedBatch`), the
server runs forward, loss and backward, updates its weights and returns the
gradient at the cut (:class:`CutGradients`), and the client finishes
backpropagation and updates. Clients take turns in round-robin order (or a
seeded random order). After every client has run its local epochs, the
server averages the client-side weights by shard size and broadcasts them.

Each client keeps its own optimizer moments across rounds; only the weights
are replaced by the broadcast.

Payloads count ``element_bytes`` (default 4) per transmitted number, the
transport encoding, even though training runs in float64. Client time is
modelled: FLOPs divided by ``client_flops_per_sec`` plus transfer latency.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .errors import DomainError
from .metrics import write_csv
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

__all__ = [
    "ProtocolError",
    "SmashedBatch",
    "CutGradients",
    "ClientState",
    "ServerState",
    "TrainingMetrics",
    "init_sl",
    "run_round",
    "run_training",
    "latency_of",
]


class ProtocolError(DomainError):
    """A message does not fit the receiving side's model."""


@dataclass
class SmashedBatch:
    client_id: int
    round: int
    batch_index: int
    activations: np.ndarray
    labels: np.ndarray
    payload_bytes: int


@dataclass
class CutGradients:
    client_id: int
    round: int
    gradient: np.ndarray
    payload_bytes: int


@dataclass
class ClientState:
    client_id: int
    params: list
    opt: Optional[nn.AdamState]
    data: object  # Dataset shard
    seconds: float = 0.0
    flops: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    steps: int = 0


@dataclass
class ServerState:
    params: list
    opt: Optional[nn.AdamState]
    global_client_params: list
    round: int = 0
    bytes_received: int = 0
    flops: int = 0


@dataclass
class TrainingMetrics:
    rows: list = field(default_factory=list)
    columns: tuple = METRIC_COLUMNS

    def write(self, path):
        return write_csv(path, self.columns, self.rows)

    def series(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)


def _per_sample_flops(spec: nn.ModelSpec) -> int:
    return sum(f.total for f in nn.count_flops(spec))


def init_sl(cfg: TrainConfig, model: nn.ModelSpec, data: PreparedData, params=None):
    """Fresh client and server states holding the same initial model."""
    full = nn.init_params(model, cfg.seed) if params is None else list(params)
    client_spec, server_spec = nn.split_model(model, cfg.cut)
    cp, sp = nn.split_params(full, cfg.cut)
    clients = [
        ClientState(client_id=u, params=list(cp),
                    opt=nn.adam_init(cp, lr=cfg.lr) if cfg.optimizer == "adam" else None,
                    data=data.shards[u])
        for u in range(cfg.clients)
    ]
    server = ServerState(params=sp,
                         opt=nn.adam_init(sp, lr=cfg.lr) if cfg.optimizer == "adam" else None,
                         global_client_params=list(cp))
    return client_spec, server_spec, clients, server


def _server_step(server: ServerState, spec: nn.ModelSpec, msg: SmashedBatch, step: int,
                 cfg: TrainConfig, cut_shape: tuple):
    if msg.activations.shape[1:] != cut_shape:
        raise ProtocolError(
            f"client {msg.client_id}, batch {msg.batch_index}: activations "
            f"{msg.activations.shape[1:]} do not match cut shape {cut_shape}")
    server.bytes_received += msg.payload_bytes
    trace, logits = nn.forward(spec, server.params, msg.activations, True,
                               seed=(cfg.seed, msg.client_id), step=step)
    loss, dlogits = nn.loss_and_grad(logits, msg.labels)
    grads, dcut = nn.backward(spec, server.params, trace, dlogits)
    server.params, server.opt = _apply(server.params, grads, server.opt, cfg)
    n = msg.activations.shape[0]
    server.flops += n * _per_sample_flops(spec)
    reply = CutGradients(client_id=msg.client_id, round=msg.round, gradient=dcut,
                         payload_bytes=int(dcut.size) * cfg.element_bytes)
    return loss, reply


def run_round(clients: list, server: ServerState, client_spec: nn.ModelSpec,
              server_spec: nn.ModelSpec, cfg: TrainConfig, rnd: int):
    """One round of sequential split training followed by aggregation.

    Returns the sample-weighted mean training loss of the round.
    """
    if cfg.schedule == "random":
        order = np.random.default_rng([cfg.seed, 11, rnd]).permutation(len(clients))
    else:
        order = range(len(clients))
    cut_shape = server_spec.input_shape
    client_flops = _per_sample_flops(client_spec)
    loss_sum, seen = 0.0, 0
    for u in order:
        c = clients[u]
        for epoch in range(cfg.local_epochs):
            for b, idx in enumerate(batch_order(len(c.data), cfg.batch_size, cfg.seed,
                                                rnd, epoch, c.client_id)):
                x, y = c.data.images[idx], c.data.labels[idx]
                trace, act = nn.forward(client_spec, c.params, x, True,
                                        seed=(cfg.seed, c.client_id), step=c.steps)
                msg = SmashedBatch(c.client_id, rnd, b, act, y,
                                   (int(act.size) + int(y.size)) * cfg.element_bytes)
                c.bytes_up += msg.payload_bytes
                loss, reply = _server_step(server, server_spec, msg, c.steps, cfg, cut_shape)
                if reply.gradient.shape != act.shape:
                    raise ProtocolError(f"client {c.client_id}, batch {b}: gradient shape "
                                        f"{reply.gradient.shape} != activations {act.shape}")
                c.bytes_down += reply.payload_bytes
                grads, _ = nn.backward(client_spec, c.params, trace, reply.gradient)
                c.params, c.opt = _apply(c.params, grads, c.opt, cfg)
                c.flops += len(idx) * client_flops
                c.seconds += (len(idx) * client_flops / cfg.client_flops_per_sec
                              + latency_of(msg.payload_bytes, cfg.uplink_rate)
                              + latency_of(reply.payload_bytes, cfg.downlink_rate))
                c.steps += 1
                loss_sum += loss * len(idx)
                seen += len(idx)

    # client-side aggregation weighted by shard size, then broadcast
    model_bytes = client_spec.param_count * cfg.element_bytes
    sizes = [len(c.data) for c in clients]
    server.global_client_params = weighted_average([c.params for c in clients], sizes)
    for c in clients:
        c.bytes_up += model_bytes
        c.bytes_down += model_bytes
        c.seconds += (latency_of(model_bytes, cfg.uplink_rate)
                      + latency_of(model_bytes, cfg.downlink_rate))
        c.params = list(server.global_client_params)
    server.round = rnd + 1
    return loss_sum / seen if seen else 0.0


def _metric_row(rnd, loss, m, clients):
    return {
        "round": rnd + 1,
        "loss": loss,
        "acc": m.accuracy,
        "precision": m.precision,
        "recall": m.recall,
        "f1": m.f1,
        "avg_client_sec": float(np.mean([c.seconds for c in clients])),
        "total_client_tflops": sum(c.flops for c in clients) / 1e12,
        "bytes_up": sum(c.bytes_up for c in clients),
        "bytes_down": sum(c.bytes_down for c in clients),
    }


def run_training(cfg: TrainConfig, model: Optional[nn.ModelSpec] = None,
                 data: Optional[PreparedData] = None, params=None):
    """Train for ``cfg.rounds`` rounds, evaluating on the validation split each round.

    Stops early once validation accuracy reaches ``cfg.target_accuracy``.
    Returns ``(metrics, full_params, clients, server)``.
    """
    model = nn.desk_cnn() if model is None else model
    data = prepare_data(cfg) if data is None else data
    if len(data.shards) != cfg.clients:
        raise DomainError(f"{len(data.shards)} shards for {cfg.clients} clients")
    client_spec, server_spec, clients, server = init_sl(cfg, model, data, params)
    metrics = TrainingMetrics()
    for rnd in range(cfg.rounds):
        loss = run_round(clients, server, client_spec, server_spec, cfg, rnd)
        full = list(server.global_client_params) + list(server.params)
        m = evaluate(model, full, data.val)
        metrics.rows.append(_metric_row(rnd, loss, m, clients))
        if cfg.target_accuracy is not None and m.accuracy >= cfg.target_accuracy:
            break
    full = list(server.global_client_params) + list(server.params)
    return metrics, full, clients, server
