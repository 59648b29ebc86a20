"""
Federated baselines on the same shards
======================================

FedAvg, FedProx and FedOpt (server-side Adam) train the whole model on each
client and average weights once per round. Compared with split learning at
cut 12, every client does all the FLOPs of the network.
"""
from splitedge.fl import FedConfig, run_fl_training
from splitedge.sl import run_training
from splitedge.training import DataConfig, TrainConfig, prepare_data

cfg = TrainConfig(clients=4, rounds=3, data=DataConfig(n_samples=1500))
data = prepare_data(cfg)

_, _, sl_clients, _ = run_training(cfg, data=data)
sl_flops = sum(c.flops for c in sl_clients)

for variant in ("fedavg", "fedprox", "fedopt"):
    metrics, _, clients = run_fl_training(cfg, FedConfig(variant), data=data)
    last = metrics.rows[-1]
    ratio = sl_flops / sum(c.flops for c in clients)
    print(f"{variant:8s} acc {last['acc']:.3f}  SL/FL client FLOPs {ratio:.3f}")
