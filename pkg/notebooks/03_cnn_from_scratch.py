"""
A small CNN in plain numpy
==========================

Forward and backward passes for conv, ReLU, dropout, max-pooling, flatten
and dense layers, checked against central finite differences, plus the
per-layer FLOP profile used for cost accounting.
"""
import numpy as np

from splitedge import nn

model = nn.desk_cnn()
params = nn.init_params(model, seed=0)
print(f"{len(model)} layers, {model.param_count} parameters")

rng = np.random.default_rng(0)
x = rng.standard_normal((4,) + model.input_shape)
y = np.array([0, 1, 1, 0])

trace, logits = nn.forward(model, params, x, True, seed=(0, 0), step=0)
loss, dlogits = nn.loss_and_grad(logits, y)
grads, _ = nn.backward(model, params, trace, dlogits)
print(f"loss {loss:.4f}")

# Finite-difference check on a few weights of the last dense layer
W = params[-1][0]
for idx in [(0, 0), (5, 1), (100, 0)]:
    h = 1e-6
    W[idx] += h
    up, _ = nn.loss_and_grad(nn.forward(model, params, x, True, seed=(0, 0), step=0)[1], y)
    W[idx] -= 2 * h
    down, _ = nn.loss_and_grad(nn.forward(model, params, x, True, seed=(0, 0), step=0)[1], y)
    W[idx] += h
    fd = (up - down) / (2 * h)
    print(f"dL/dW{idx}: analytic {grads[-1][0][idx]:+.8f}, numeric {fd:+.8f}")

# Per-sample training FLOPs (forward + backward) by layer
flops = nn.count_flops(model)
total = sum(f.total for f in flops)
for i, f in enumerate(flops):
    print(f"{i:2d} {f.kind:9s} {f.total:>10d}  {f.total / total:6.2%}")
