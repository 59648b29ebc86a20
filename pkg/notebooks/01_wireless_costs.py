"""
Per-round energy and latency of edge devices
============================================

Drops devices in a disc around the base station, then prices one global
round: uplink rate from the FDMA Shannon formula, transmit energy, and the
local compute energy and time at a given CPU frequency.
"""
import numpy as np

from splitedge.wireless import (
    SystemParams, dbm_to_watts, generate_topology, make_devices, per_round_costs, totals,
)

# Ten devices within 250 m; path loss grows with log-distance
top = generate_topology(10, 250.0, seed=0)
print("distances (m):", np.round(top.distances, 1))

sys = SystemParams(device_count=10)
devices = make_devices(top.gains)

# Equal bandwidth split, full power, 1 GHz everywhere
b = sys.total_bandwidth / sys.device_count
p = float(dbm_to_watts(12.0))
costs = [per_round_costs(d, sys, p, b, 1e9) for d in devices]
for d, c in zip(devices[:3], costs[:3]):
    print(f"device {d.id}: rate {c.rate / 1e6:.2f} Mbit/s, uplink {c.uplink_time * 1e3:.2f} ms, "
          f"compute {c.compute_time * 1e3:.1f} ms")

# Energy adds up over devices, latency is set by the slowest one
energy, latency = totals(costs, sys.global_rounds)
print(f"over {sys.global_rounds} rounds: energy {energy:.3f} J, time {latency:.2f} s")

# Halving the clock cuts compute energy by four and doubles compute time
half = per_round_costs(devices[0], sys, p, b, 0.5e9)
print("energy ratio:", costs[0].compute_energy / half.compute_energy,
      "time ratio:", half.compute_time / costs[0].compute_time)
