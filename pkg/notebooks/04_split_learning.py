"""
Split learning across four clients
==================================

Each client runs the layers before the cut and ships the smashed activations
to the server, which finishes the pass and returns the cut-layer gradient.
Client-side weights are averaged once per round. With one client the run
reproduces plain centralised training bit for bit.
"""
import numpy as np

from splitedge import nn
from splitedge.sl import run_training
from splitedge.training import DataConfig, TrainConfig, centralized_train, prepare_data

cfg = TrainConfig(clients=4, rounds=4, cut=12, data=DataConfig(n_samples=1500))
metrics, params, clients, server = run_training(cfg)
for r in metrics.rows:
    print(f"round {r['round']}: loss {r['loss']:.4f} acc {r['acc']:.3f} f1 {r['f1']:.3f}")

client_flops = sum(c.flops for c in clients)
print(f"client share of FLOPs: {client_flops / (client_flops + server.flops):.4f}")
print(f"bytes sent up: {sum(c.bytes_up for c in clients)}")

# One client, same seed: identical to centralised training
one = TrainConfig(clients=1, rounds=2, cut=8, data=DataConfig(n_samples=600))
data = prepare_data(one)
_, sl_params, _, _ = run_training(one, data=data)
model = nn.desk_cnn()
ref = centralized_train(model, nn.init_params(model, one.seed), data.train, one)[-1]
print("max |SL - centralised|:",
      np.max(np.abs(nn.flatten_params(sl_params) - nn.flatten_params(ref))))
