"""Physical-layer and local-computation cost model for FDMA uplinks.

All quantities are in linear SI units (W, Hz, s, J, bits). Conversions from
dB/dBm happen once, through :func:`dbm_to_watts` and :func:`db_to_linear`.

The noise term follows the usual convention: ``noise_psd`` is the spectral
density N0 (W/Hz), so the noise power seen by a device with bandwidth ``b``
is ``N0 * b`` and the SNR is ``rho * gamma / (N0 * b)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, InfeasibleError

__all__ = [
    "DomainError",
    "InfeasibleError",
    "DeviceProfile",
    "SystemParams",
    "PerRoundCosts",
    "Topology",
    "dbm_to_watts",
    "db_to_linear",
    "noise_power",
    "path_loss_db",
    "uplink_rate",
    "per_round_costs",
    "totals",
    "min_rate",
    "generate_topology",
    "make_devices",
]


def dbm_to_watts(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def noise_power(noise_psd: float, bandwidth: float) -> float:
    """Noise power in watts over ``bandwidth`` Hz."""
    return noise_psd * bandwidth


def path_loss_db(distance_m):
    """Macro-cell path loss ``128.1 + 37.6 log10(d_km)`` in dB."""
    d_km = np.asarray(distance_m, dtype=float) / 1000.0
    return 128.1 + 37.6 * np.log10(d_km)


@dataclass(frozen=True)
class DeviceProfile:
    """Radio and compute parameters of one edge device.

    ``payload_bits`` is the uplink payload per global round and
    ``cycles_per_sample`` the CPU cycles needed to process one sample.
    """

    id: int
    channel_gain: float
    power_min: float
    power_max: float
    freq_min: float
    freq_max: float
    cycles_per_sample: float = 2e4
    dataset_size: int = 500
    payload_bits: float = 28.1e3

    def __post_init__(self):
        if not self.channel_gain > 0:
            raise DomainError(f"device {self.id}: channel gain must be > 0")
        if not 0 < self.power_min <= self.power_max:
            raise DomainError(f"device {self.id}: need 0 < power_min <= power_max")
        if not 0 < self.freq_min <= self.freq_max:
            raise DomainError(f"device {self.id}: need 0 < freq_min <= freq_max")
        if self.dataset_size < 1:
            raise DomainError(f"device {self.id}: dataset_size must be >= 1")
        if not self.payload_bits > 0 or not self.cycles_per_sample > 0:
            raise DomainError(f"device {self.id}: payload and cycles must be > 0")


@dataclass(frozen=True)
class SystemParams:
    device_count: int = 50
    noise_psd: float = float(dbm_to_watts(-174.0))
    capacitance: float = 1e-28
    local_iters: int = 10
    global_rounds: int = 400
    alpha: float = 0.5
    total_bandwidth: float = 20e6

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError("alpha must lie in [0, 1]")
        if not self.total_bandwidth > 0:
            raise DomainError("total_bandwidth must be > 0")
        if self.global_rounds < 1 or self.local_iters < 1 or self.device_count < 1:
            raise DomainError("global_rounds, local_iters and device_count must be >= 1")
        if not self.noise_psd > 0 or not self.capacitance > 0:
            raise DomainError("noise_psd and capacitance must be > 0")


@dataclass(frozen=True)
class PerRoundCosts:
    rate: float
    uplink_time: float
    tx_energy: float
    compute_time: float
    compute_energy: float

    @property
    def time(self) -> float:
        return self.compute_time + self.uplink_time

    @property
    def energy(self) -> float:
        return self.tx_energy + self.compute_energy


@dataclass
class Topology:
    positions: np.ndarray
    distances: np.ndarray
    gains: np.ndarray = field(repr=False)


def uplink_rate(bandwidth, power, gain, noise_psd):
    """Shannon rate ``b log2(1 + rho*gamma / (N0*b))`` in bits/s.

    Works elementwise on arrays. ``log1p`` keeps low-SNR rates accurate.
    """
    b = np.asarray(bandwidth, dtype=float)
    p = np.asarray(power, dtype=float)
    g = np.asarray(gain, dtype=float)
    if np.any(b <= 0) or np.any(p <= 0) or np.any(g <= 0) or not noise_psd > 0:
        raise DomainError("uplink_rate needs strictly positive inputs")
    out = b * np.log1p(p * g / (noise_psd * b)) / np.log(2.0)
    return float(out) if out.ndim == 0 else out


def _compute_cycles(dev: DeviceProfile, sys: SystemParams) -> float:
    return sys.local_iters * dev.cycles_per_sample * dev.dataset_size


def per_round_costs(dev: DeviceProfile, sys: SystemParams, power: float,
                    bandwidth: float, freq: float) -> PerRoundCosts:
    if bandwidth <= 0:
        raise DomainError(f"device {dev.id}: zero bandwidth gives zero rate")
    if freq <= 0:
        raise DomainError(f"device {dev.id}: CPU frequency must be > 0")
    rate = uplink_rate(bandwidth, power, dev.channel_gain, sys.noise_psd)
    t_ul = dev.payload_bits / rate
    cycles = _compute_cycles(dev, sys)
    return PerRoundCosts(
        rate=rate,
        uplink_time=t_ul,
        tx_energy=power * t_ul,
        compute_time=cycles / freq,
        compute_energy=sys.capacitance * cycles * freq ** 2,
    )


def totals(costs: Sequence[PerRoundCosts], global_rounds: int) -> tuple[float, float]:
    """Total energy and completion time over ``global_rounds`` rounds."""
    if len(costs) == 0:
        raise DomainError("totals needs at least one device")
    energy = global_rounds * sum(c.tx_energy + c.compute_energy for c in costs)
    time = global_rounds * max(c.compute_time + c.uplink_time for c in costs)
    return energy, time


def min_rate(dev: DeviceProfile, sys: SystemParams, latency_cap: float,
             freq: float) -> float:
    """Smallest uplink rate meeting ``t_cmp + t_ul <= latency_cap``."""
    slack = latency_cap - _compute_cycles(dev, sys) / freq
    if not slack > 0:
        raise InfeasibleError(
            f"device {dev.id}: latency cap {latency_cap:g}s leaves no time to upload",
            [dev.id])
    return dev.payload_bits / slack


def generate_topology(device_count: int, region_radius: float = 250.0,
                      seed: int = 0, min_distance: float = 1.0) -> Topology:
    """Drop devices uniformly in a disk centred on the server.

    Distances below ``min_distance`` metres are clamped so the gain stays finite.
    """
    if device_count < 1 or not region_radius > 0:
        raise DomainError("need device_count >= 1 and region_radius > 0")
    rng = np.random.default_rng(seed)
    r = region_radius * np.sqrt(rng.uniform(size=device_count))
    angle = rng.uniform(0.0, 2.0 * np.pi, size=device_count)
    positions = np.column_stack([r * np.cos(angle), r * np.sin(angle)])
    distances = np.maximum(np.hypot(positions[:, 0], positions[:, 1]), min_distance)
    gains = db_to_linear(-path_loss_db(distances))
    return Topology(positions=positions, distances=distances, gains=gains)


def make_devices(gains, *, power_min: float = 1e-3,
                 power_max: float = float(dbm_to_watts(12.0)),
                 freq_min: float = 0.2e9, freq_max: float = 2e9,
                 cycles_per_sample: float = 2e4, dataset_size: int = 500,
                 payload_bits: float = 28.1e3) -> list[DeviceProfile]:
    """Homogeneous-hardware devices differing only by channel gain."""
    return [
        DeviceProfile(id=i, channel_gain=float(g), power_min=power_min,
                      power_max=power_max, freq_min=freq_min, freq_max=freq_max,
                      cycles_per_sample=cycles_per_sample, dataset_size=dataset_size,
                      payload_bits=payload_bits)
        for i, g in enumerate(np.asarray(gains, dtype=float))
    ]
