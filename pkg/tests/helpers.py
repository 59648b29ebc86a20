"""Instance generators and independent reference implementations for the tests."""
import math

import numpy as np

from splitedge.allocator import AllocationProblem
from splitedge.wireless import SystemParams, db_to_linear, make_devices, path_loss_db

# criterion number -> (passed, one-line detail); filled by test_acceptance.py
ACCEPTANCE = {}


def random_problem(rng, m, alpha=None, bandwidth=None, payload=None, power_min=1e-3,
                   min_dist=20.0, max_dist=250.0, **device_kw):
    """Devices at uniform random distances with the default hardware."""
    alpha = float(rng.uniform(0.05, 0.95)) if alpha is None else alpha
    bandwidth = float(rng.uniform(0.2e6, 2e6)) if bandwidth is None else bandwidth
    gains = db_to_linear(-path_loss_db(rng.uniform(min_dist, max_dist, m)))
    kw = dict(power_min=power_min, **device_kw)
    if payload is not None:
        kw["payload_bits"] = payload
    devices = make_devices(gains, **kw)
    sys = SystemParams(device_count=m, alpha=alpha, total_bandwidth=bandwidth)
    return AllocationProblem(devices, sys)


def scalar_rate(b, p, g, n0):
    """Shannon rate written out with math.log2, one device at a time."""
    return b * math.log2(1.0 + p * g / (n0 * b))


def reference_objective(prob, rho, b, phi, cap):
    s = prob.sys
    total = 0.0
    for u, d in enumerate(prob.devices):
        r = scalar_rate(b[u], rho[u], d.channel_gain, s.noise_psd)
        cyc = s.local_iters * d.cycles_per_sample * d.dataset_size
        total += rho[u] * d.payload_bits / r + s.capacitance * cyc * phi[u] ** 2
    return s.alpha * s.global_rounds * total + (1 - s.alpha) * s.global_rounds * cap


def reference_weighted_mean(arrays, weights):
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    return sum(wi * a for wi, a in zip(w, arrays))


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` with respect to array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


LAYER_KINDS = ("conv2d", "relu", "dropout", "maxpool2d", "flatten", "dense")


def single_layer_model(kind, rng):
    """A one-layer model of ``kind`` with small random shapes."""
    from splitedge import nn

    c = int(rng.integers(1, 4))
    h = 2 * int(rng.integers(2, 4))
    if kind == "conv2d":
        layer = nn.conv2d(c, int(rng.integers(1, 4)))
    elif kind == "dense":
        return nn.ModelSpec((nn.dense(6, 4),), (6,))
    else:
        layer = {"relu": nn.relu, "dropout": nn.dropout, "maxpool2d": nn.maxpool2d,
                 "flatten": nn.flatten}[kind]()
    return nn.ModelSpec((layer,), (c, h, h))


def layer_gradient_error(kind, seed):
    """Largest relative error between analytic and central-difference gradients
    of ``sum(R * layer(x))`` for a random one-layer model, over the input and
    every parameter tensor."""
    from splitedge import nn

    rng = np.random.default_rng(seed)
    spec = single_layer_model(kind, rng)
    params = nn.init_params(spec, seed)
    x = rng.standard_normal((3,) + spec.input_shape)
    r = rng.standard_normal((3,) + spec.output_shape)

    def loss():
        _, out = nn.forward(spec, params, x, train=True, seed=seed, step=1)
        return float(np.sum(r * out))

    trace, _ = nn.forward(spec, params, x, train=True, seed=seed, step=1)
    grads, dx = nn.backward(spec, params, trace, r)
    errs = [rel_err(dx, numeric_grad(loss, x))]
    for layer_p, layer_g in zip(params, grads):
        for p, g in zip(layer_p, layer_g):
            errs.append(rel_err(g, numeric_grad(loss, p)))
    return max(errs)
