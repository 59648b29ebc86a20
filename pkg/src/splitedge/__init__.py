"""Split learning for wireless edge devices.

Modules
-------
wireless
    Devices, channel gains, uplink rates and per-round energy/latency.
allocator
    Joint power, bandwidth and CPU-frequency allocation.
nn
    A numpy CNN with explicit forward/backward passes, splitting and FLOP counts.
data
    Synthetic imbalanced image task, rebalancing, splits and client shards.
sl, fl
    The split-learning engine and the FedAvg/FedProx/FedOpt baselines.
config, experiments, cli
    TOML configuration, experiment drivers and the ``splitedge`` command.
"""
from .errors import ConfigError, DomainError, InfeasibleError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DomainError", "InfeasibleError", "NumericalError", "__version__"]
