"""
Joint power, bandwidth and CPU allocation
=========================================

Minimises a weighted sum of total energy and total latency by alternating a
CPU/latency-cap step with a radio step (water-filling plus a Dinkelbach
certificate), then checks the answer against an exhaustive grid and its KKT
residuals.
"""
import numpy as np

from splitedge.allocator import (
    AllocationProblem, alternate_optimize, brute_force_allocate, kkt_residuals, trajectory_csv,
)
from splitedge.wireless import SystemParams, generate_topology, make_devices

top = generate_topology(2, 250.0, seed=4)
prob = AllocationProblem(make_devices(top.gains), SystemParams(device_count=2, alpha=0.5))

sol = alternate_optimize(prob)
print(f"objective {sol.objective:.6g} after {sol.iterations} outer iterations "
      f"(converged={sol.converged})")
print("power (mW):", np.round(sol.powers * 1e3, 3))
print("bandwidth (MHz):", np.round(sol.bandwidths / 1e6, 4))
print("frequency (GHz):", np.round(sol.freqs / 1e9, 4))

# The objective trajectory never goes up
print(trajectory_csv(sol))

# A 41-point grid per axis is a quick sanity check; the tests use 101
grid = brute_force_allocate(prob, 41)
print(f"grid objective {grid.objective:.6g}, gap {(sol.objective / grid.objective - 1):+.3%}")

# Complementary slackness and the Newton system of the radio step
for k, v in kkt_residuals(prob, sol).items():
    print(f"{k}: {v:.2e}")

# Energy-only and latency-only weights bracket the trade-off
for alpha in (0.0, 0.5, 1.0):
    p = AllocationProblem(make_devices(top.gains), SystemParams(device_count=2, alpha=alpha))
    s = alternate_optimize(p)
    print(f"alpha={alpha}: E={s.energy:.4g} J, T={s.time:.4g} s")
