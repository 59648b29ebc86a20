"""Experiment drivers behind the command-line subcommands.

Every driver takes an :class:`~splitedge.config.ExperimentConfig`, writes
plot-ready CSV files under ``<out_dir>/<subcommand>/`` and returns a dict
describing what it produced. Independent runs inside a driver may be spread
over ``experiment.parallel`` worker processes; results are gathered in a
fixed order so the files do not depend on the worker count.
"""
from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import nn
from .allocator import AllocationProblem, alternate_optimize, trajectory_csv
from .config import ExperimentConfig
from .data import downsample_majority, generate, save_dataset
from .errors import InfeasibleError
from .fl import FedConfig, run_fl_training
from .metrics import write_csv
from .sl import run_training
from .training import TrainConfig, prepare_data
from .wireless import SystemParams, dbm_to_watts, generate_topology, make_devices

__all__ = ["cmd_compare", "cmd_sweep_cut", "cmd_sweep_clients", "cmd_allocate",
           "cmd_gen_data", "client_flop_fraction", "ALLOCATE_COLUMNS"]


def _map(fn, jobs, parallel: int):
    if parallel <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(fn, jobs))


def _out(cfg: ExperimentConfig, name: str) -> Path:
    path = Path(cfg.experiment.out_dir) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def client_flop_fraction(model: nn.ModelSpec, cut: int) -> float:
    """Share of per-sample training FLOPs (forward + backward) run before ``cut``."""
    flops = [f.total for f in nn.count_flops(model)]
    return sum(flops[:cut]) / sum(flops)


# ---------------------------------------------------------------------------
# SL vs FL


def _compare_job(job):
    kind, tcfg, fed = job
    if kind == "sl":
        metrics, _, _, _ = run_training(tcfg)
    else:
        metrics, _, _ = run_fl_training(tcfg, fed)
    return metrics


def cmd_compare(cfg: ExperimentConfig) -> dict:
    """SL and each configured FL variant on identical shards and seeds."""
    tcfg = cfg.train_config()
    jobs = [("sl", tcfg, None)] + [
        ("fl", tcfg, FedConfig(v, prox_mu=cfg.fl.prox_mu, server_lr=cfg.fl.server_lr))
        for v in cfg.fl.variants
    ]
    results = _map(_compare_job, jobs, cfg.experiment.parallel)
    out = _out(cfg, "compare")
    files = {"sl": results[0].write(out / "sl_metrics.csv")}
    for (_, _, fed), metrics in zip(jobs[1:], results[1:]):
        files[fed.variant] = metrics.write(out / f"fl_metrics_{fed.variant}.csv")

    model = nn.desk_cnn((1, cfg.data.height, cfg.data.width))
    sl_tflops = results[0].rows[-1]["total_client_tflops"] if results[0].rows else 0.0
    summary = []
    for (kind, _, fed), metrics in zip(jobs, results):
        last = metrics.rows[-1] if metrics.rows else None
        fl_tflops = last["total_client_tflops"] if last else 0.0
        summary.append({
            "method": "sl" if kind == "sl" else fed.variant,
            "rounds": len(metrics.rows),
            "final_acc": last["acc"] if last else 0.0,
            "final_f1": last["f1"] if last else 0.0,
            "best_acc": max((r["acc"] for r in metrics.rows), default=0.0),
            "avg_client_sec": last["avg_client_sec"] if last else 0.0,
            "total_client_tflops": fl_tflops,
            "sl_to_method_client_flops": sl_tflops / fl_tflops if fl_tflops else 0.0,
        })
    files["summary"] = write_csv(
        out / "compare_summary.csv",
        ("method", "rounds", "final_acc", "final_f1", "best_acc", "avg_client_sec",
         "total_client_tflops", "sl_to_method_client_flops"), summary)
    return {"files": files, "results": dict(zip(["sl"] + list(cfg.fl.variants), results)),
            "analytic_client_fraction": client_flop_fraction(model, tcfg.cut)}


# ---------------------------------------------------------------------------
# SL sweeps

SWEEP_COLUMNS = ("round", "epoch", "loss", "acc", "f1", "avg_client_sec",
                 "total_client_tflops", "per_client_tflops", "bytes_up",
                 "smashed_bytes_per_batch")


def _sl_job(tcfg: TrainConfig):
    metrics, _, _, _ = run_training(tcfg)
    return metrics


def _sweep_rows(tcfg: TrainConfig, metrics, key: str, value) -> list:
    model = nn.desk_cnn((1, tcfg.data.height, tcfg.data.width))
    cut_shape = model.shapes[tcfg.cut]
    smashed = tcfg.batch_size * (int(np.prod(cut_shape)) + 1) * tcfg.element_bytes
    rows = []
    for r in metrics.rows:
        rows.append({key: value, "round": r["round"],
                     "epoch": r["round"] * tcfg.local_epochs, "loss": r["loss"],
                     "acc": r["acc"], "f1": r["f1"], "avg_client_sec": r["avg_client_sec"],
                     "total_client_tflops": r["total_client_tflops"],
                     "per_client_tflops": r["total_client_tflops"] / tcfg.clients,
                     "bytes_up": r["bytes_up"], "smashed_bytes_per_batch": smashed})
    return rows


def cmd_sweep_cut(cfg: ExperimentConfig) -> dict:
    """One SL run per cut position."""
    cfgs = [cfg.train_config(cut=c) for c in cfg.sweep.cuts]
    results = _map(_sl_job, cfgs, cfg.experiment.parallel)
    rows = []
    for tcfg, metrics in zip(cfgs, results):
        rows += _sweep_rows(tcfg, metrics, "cut", tcfg.cut)
    path = write_csv(_out(cfg, "sweep_cut") / "sweep_cut.csv", ("cut",) + SWEEP_COLUMNS, rows)
    return {"files": {"sweep": path}, "results": dict(zip(cfg.sweep.cuts, results))}


def cmd_sweep_clients(cfg: ExperimentConfig) -> dict:
    """One SL run per client count on the same dataset."""
    cfgs = [cfg.train_config(clients=n) for n in cfg.sweep.client_counts]
    results = _map(_sl_job, cfgs, cfg.experiment.parallel)
    out = _out(cfg, "sweep_clients")
    rows, files = [], {}
    for tcfg, metrics in zip(cfgs, results):
        rows += _sweep_rows(tcfg, metrics, "clients", tcfg.clients)
        files[tcfg.clients] = metrics.write(out / f"sl_metrics_clients_{tcfg.clients}.csv")
    files["sweep"] = write_csv(out / "sweep_clients.csv", ("clients",) + SWEEP_COLUMNS, rows)
    return {"files": files, "results": dict(zip(cfg.sweep.client_counts, results))}


# ---------------------------------------------------------------------------
# allocation sweeps

ALLOCATE_COLUMNS = ("axis", "value", "w1", "w2", "E", "T", "objective", "iterations",
                    "converged", "infeasible")


def _problem(cfg: ExperimentConfig, alpha: float, **change) -> AllocationProblem:
    a = dataclasses.replace(cfg.allocator, **change)
    top = generate_topology(a.device_count, a.region_radius, seed=cfg.experiment.seed)
    devices = make_devices(top.gains, power_min=a.power_min_w,
                           power_max=float(dbm_to_watts(a.power_max_dbm)),
                           freq_min=a.freq_min_ghz * 1e9, freq_max=a.freq_max_ghz * 1e9,
                           cycles_per_sample=a.cycles_per_sample,
                           dataset_size=a.dataset_size, payload_bits=a.payload_kbits * 1e3)
    sys = SystemParams(device_count=a.device_count,
                       noise_psd=float(dbm_to_watts(a.noise_psd_dbm)),
                       capacitance=a.capacitance, local_iters=a.local_iters,
                       global_rounds=a.global_rounds, alpha=alpha,
                       total_bandwidth=a.total_bandwidth_mhz * 1e6)
    return AllocationProblem(devices, sys)


def _allocate_job(job):
    cfg, axis, value, w1, w2, change = job
    a = cfg.allocator
    row = {"axis": axis, "value": value, "w1": w1, "w2": w2}
    try:
        prob = _problem(cfg, w1, **change)
        sol = alternate_optimize(prob, outer_tol=a.outer_tol, inner_tol=a.inner_tol,
                                 max_outer=a.max_outer)
    except InfeasibleError:
        row.update(E=0.0, T=0.0, objective=0.0, iterations=0, converged=False,
                   infeasible=True)
        return row, None
    row.update(E=sol.energy, T=sol.time, objective=sol.objective,
               iterations=sol.iterations, converged=sol.converged, infeasible=False)
    return row, sol


def cmd_allocate(cfg: ExperimentConfig) -> dict:
    """Energy/latency/objective versus max power, max CPU frequency and bandwidth.

    Each weight pair ``(w1, w2)`` sets ``alpha = w1`` (energy weight) and
    ``1 - alpha = w2`` (latency weight). Infeasible sweep points are written
    with ``infeasible=1``. If the unswept base system itself is infeasible the
    sweep file is still written and :class:`InfeasibleError` is raised.
    """
    a = cfg.allocator
    axes = [("power_max_dbm", a.power_max_dbm_sweep, "power_max_dbm"),
            ("freq_max_ghz", a.freq_max_ghz_sweep, "freq_max_ghz"),
            ("bandwidth_mhz", a.bandwidth_mhz_sweep, "total_bandwidth_mhz")]
    jobs = [(cfg, name, float(v), float(w1), float(w2), {field: float(v)})
            for w1, w2 in a.weight_pairs for name, values, field in axes for v in values]
    base = [(cfg, "default", 0.0, float(w1), float(w2), {}) for w1, w2 in a.weight_pairs]
    results = _map(_allocate_job, jobs + base, cfg.experiment.parallel)
    out = _out(cfg, "allocate")
    rows = [r for r, _ in results[:len(jobs)]]
    files = {"sweep": write_csv(out / "allocate.csv", ALLOCATE_COLUMNS, rows)}
    for (_, _, _, w1, w2, _), (_, sol) in zip(base, results[len(jobs):]):
        if sol is not None:
            path = out / f"trajectory_w1_{w1:g}_w2_{w2:g}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                fh.write(trajectory_csv(sol))
            files[(w1, w2)] = path
    if all(sol is None for _, sol in results[len(jobs):]):
        prob = _problem(cfg, base[0][3])
        alternate_optimize(prob, max_outer=1)  # re-raises with the violating devices
    return {"files": files, "rows": rows}


# ---------------------------------------------------------------------------
# data export


def cmd_gen_data(cfg: ExperimentConfig) -> dict:
    """Write the raw synthetic set, the rebalanced set and the normalised splits."""
    tcfg = cfg.train_config()
    d = cfg.data
    out = _out(cfg, "data")
    raw = generate(d.n_samples, d.height, d.width, d.minority_fraction,
                   seed=tcfg.seed, signal=d.signal, block=d.block, bias=d.bias)
    files = {"raw": save_dataset(raw, out / "raw")}
    files["balanced"] = save_dataset(downsample_majority(raw, d.downsample_ratio, tcfg.seed),
                                     out / "balanced")
    prepared = prepare_data(tcfg)
    for name in ("train", "val", "test"):
        files[name] = save_dataset(getattr(prepared, name), out / name)
    for u, s in enumerate(prepared.shards):
        files[f"shard_{u}"] = save_dataset(s, out / f"shard_{u}")
    rows = [{"split": k, "samples": len(ds), "positives": int(ds.class_counts[1])}
            for k, ds in [("raw", raw), ("train", prepared.train), ("val", prepared.val),
                          ("test", prepared.test)]
            + [(f"shard_{u}", s) for u, s in enumerate(prepared.shards)]]
    files["summary"] = write_csv(out / "data_summary.csv", ("split", "samples", "positives"),
                                 rows)
    return {"files": files}
