"""A small deterministic CNN engine in float64 numpy.

Layers are described by :class:`LayerSpec` and stacked in a :class:`ModelSpec`.
Parameters live outside the ``ModelSpec`` as a list with one tuple per layer: ``(W, b)``
for conv/dense layers and ``()`` for the rest. All functions are pure; an
optimizer step returns fresh arrays.

Dropout masks are drawn from ``default_rng([*seed, step, layer_index])`` where
``layer_index`` is the position of the layer in the *unsplit* model, so a
split model draws exactly the masks the whole model would.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError

__all__ = [
    "LayerSpec",
    "ModelSpec",
    "Trace",
    "FlopCount",
    "AdamState",
    "conv2d",
    "relu",
    "dropout",
    "maxpool2d",
    "flatten",
    "dense",
    "desk_cnn",
    "init_params",
    "forward",
    "backward",
    "loss_and_grad",
    "adam_init",
    "adam_step",
    "sgd_step",
    "split_model",
    "split_params",
    "count_flops",
    "params_to_bytes",
    "params_from_bytes",
    "flatten_params",
]

KINDS = ("conv2d", "relu", "dropout", "maxpool2d", "flatten", "dense")
PARAM_KINDS = ("conv2d", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    p: float = 0.5
    fan_in: int = 0
    fan_out: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and (self.in_channels < 1 or self.out_channels < 1
                                      or self.kernel < 1 or self.stride < 1
                                      or self.padding < 0):
            raise DomainError("conv2d needs positive channels, kernel and stride")
        if self.kind == "dense" and (self.fan_in < 1 or self.fan_out < 1):
            raise DomainError("dense needs positive fan_in and fan_out")
        if self.kind == "dropout" and not 0.0 <= self.p < 1.0:
            raise DomainError("dropout probability must lie in [0, 1)")

    @property
    def param_shapes(self) -> tuple:
        if self.kind == "conv2d":
            k = self.kernel
            return ((self.out_channels, self.in_channels, k, k), (self.out_channels,))
        if self.kind == "dense":
            return ((self.fan_in, self.fan_out), (self.fan_out,))
        return ()

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes)

    def output_shape(self, shape: tuple) -> tuple:
        """Per-sample output shape for per-sample input ``shape``."""
        if self.kind == "conv2d":
            if len(shape) != 3 or shape[0] != self.in_channels:
                raise DomainError(f"conv2d expects ({self.in_channels}, H, W), got {shape}")
            h, w = (
                (n + 2 * self.padding - self.kernel) // self.stride + 1 for n in shape[1:]
            )
            if h < 1 or w < 1:
                raise DomainError(f"conv2d input {shape} smaller than kernel")
            return (self.out_channels, h, w)
        if self.kind == "maxpool2d":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise DomainError(f"maxpool2d needs (C, H, W) with even H, W; got {shape}")
            return (shape[0], shape[1] // 2, shape[2] // 2)
        if self.kind == "flatten":
            return (int(np.prod(shape)),)
        if self.kind == "dense":
            if shape != (self.fan_in,):
                raise DomainError(f"dense expects ({self.fan_in},), got {shape}")
            return (self.fan_out,)
        return tuple(shape)


def conv2d(in_channels, out_channels, kernel=3, stride=1, padding=1) -> LayerSpec:
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, padding=padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def dropout(p=0.5) -> LayerSpec:
    return LayerSpec("dropout", p=p)


def maxpool2d() -> LayerSpec:
    return LayerSpec("maxpool2d")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def dense(fan_in, fan_out) -> LayerSpec:
    return LayerSpec("dense", fan_in=fan_in, fan_out=fan_out)


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layers with a per-sample input shape.

    ``offset`` is the index of the first layer within the model this spec was
    cut from (0 for a whole model).
    """

    layers: tuple
    input_shape: tuple
    offset: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        self.shapes  # validates composition

    @property
    def shapes(self) -> list:
        """Per-sample shapes: input of layer 0, ..., output of the last layer."""
        out = [self.input_shape]
        for layer in self.layers:
            out.append(layer.output_shape(out[-1]))
        return out

    @property
    def output_shape(self) -> tuple:
        return self.shapes[-1]

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def __len__(self):
        return len(self.layers)


def desk_cnn(input_shape=(1, 32, 32), channels=(8, 16, 32, 64), hidden=512,
             classes=2, p=0.5) -> ModelSpec:
    """Four conv-relu-dropout-maxpool blocks followed by a two-layer head.

    With the defaults the layers are numbered so that cuts 4, 8 and 12 fall
    right after blocks 1, 2 and 3.
    """
    layers = []
    c_in, h, w = input_shape
    for c in channels:
        layers += [conv2d(c_in, c), relu(), dropout(p), maxpool2d()]
        c_in, h, w = c, h // 2, w // 2
    layers += [flatten(), dense(c_in * h * w, hidden), relu(), dropout(p),
               dense(hidden, classes)]
    return ModelSpec(layers=tuple(layers), input_shape=input_shape)


# ---------------------------------------------------------------------------
# parameters


def init_params(spec: ModelSpec, seed: int = 0) -> list:
    """Uniform ``(-1/sqrt(fan_in), 1/sqrt(fan_in))`` weights and biases.

    Each layer draws from its own stream keyed by its global index, so the
    parameters of a split model equal the corresponding slice of the whole.
    """
    params = []
    for i, layer in enumerate(spec.layers):
        if layer.kind not in PARAM_KINDS:
            params.append(())
            continue
        rng = np.random.default_rng([seed, spec.offset + i])
        w_shape, b_shape = layer.param_shapes
        fan_in = int(np.prod(w_shape[1:])) if layer.kind == "conv2d" else w_shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        params.append((rng.uniform(-bound, bound, size=w_shape),
                       rng.uniform(-bound, bound, size=b_shape)))
    return params


def flatten_params(params) -> np.ndarray:
    arrays = [a.ravel() for layer in params for a in layer]
    return np.concatenate(arrays) if arrays else np.zeros(0)


_MAGIC = b"SPLW"


def params_to_bytes(params) -> bytes:
    """Little-endian blob: magic, layer count, per-layer array shapes, then data."""
    head = [_MAGIC, struct.pack("<I", len(params))]
    body = []
    for layer in params:
        head.append(struct.pack("<I", len(layer)))
        for a in layer:
            a = np.asarray(a, dtype="<f8")
            head.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
            body.append(np.ascontiguousarray(a).tobytes())
    return b"".join(head + body)


def params_from_bytes(blob: bytes) -> list:
    if blob[:4] != _MAGIC:
        raise DomainError("not a parameter blob")
    pos = 4
    (n_layers,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    shapes = []
    for _ in range(n_layers):
        (n_arr,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        layer = []
        for _ in range(n_arr):
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            layer.append(struct.unpack_from(f"<{ndim}I", blob, pos))
            pos += 4 * ndim
        shapes.append(layer)
    params = []
    for layer in shapes:
        arrays = []
        for shape in layer:
            n = int(np.prod(shape))
            arrays.append(np.frombuffer(blob, dtype="<f8", count=n, offset=pos)
                          .reshape(shape).astype(np.float64))
            pos += 8 * n
        params.append(tuple(arrays))
    if pos != len(blob):
        raise DomainError("trailing bytes in parameter blob")
    return params


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class Trace:
    """Everything backward needs from one forward pass."""

    spec: ModelSpec
    params: list
    inputs: list = field(default_factory=list)
    aux: list = field(default_factory=list)
    train: bool = True


def _im2col(x, k, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, (n, c, ho, wo, xp.shape)


def _col2im(dcols, meta, k, stride, padding):
    n, c, ho, wo, padded = meta
    d = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros(padded)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[..., i, j]
    h, w = padded[2] - 2 * padding, padded[3] - 2 * padding
    return dxp[:, :, padding:padding + h, padding:padding + w]


def _dropout_mask(shape, p, seed, step, index):
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), step, index])
    return (rng.random(shape) >= p) / (1.0 - p)


def forward(spec: ModelSpec, params, x, train: bool = True, seed=0, step: int = 0):
    """Run ``x`` (batch first) through ``spec``. Returns ``(trace, output)``.

    ``seed`` (an int or a tuple of ints) and ``step`` key the dropout masks.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise DomainError(f"batch shape {x.shape[1:]} does not match input {spec.input_shape}")
    if len(params) != len(spec.layers):
        raise DomainError("parameter list does not match the layers")
    trace = Trace(spec=spec, params=list(params), train=train)
    for i, (layer, prm) in enumerate(zip(spec.layers, params)):
        trace.inputs.append(x)
        aux = None
        kind = layer.kind
        if kind == "conv2d":
            w, b = prm
            cols, meta = _im2col(x, layer.kernel, layer.stride, layer.padding)
            out = cols @ w.reshape(w.shape[0], -1).T + b
            n, _, ho, wo, _ = meta
            x = out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
            aux = (cols, meta)
        elif kind == "relu":
            x = np.maximum(x, 0.0)
        elif kind == "dropout":
            if train and layer.p > 0:
                aux = _dropout_mask(x.shape, layer.p, seed, step, spec.offset + i)
                x = x * aux
        elif kind == "maxpool2d":
            n, c, h, w = x.shape
            blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
            blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
            aux = np.argmax(blocks, axis=-1)  # first maximum wins ties
            x = np.take_along_axis(blocks, aux[..., None], axis=-1)[..., 0]
        elif kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif kind == "dense":
            w, b = prm
            x = x @ w + b
        trace.aux.append(aux)
    return trace, x


def backward(spec: ModelSpec, params, trace: Trace, dout):
    """Gradients of a scalar loss given ``dout`` = d loss / d output.

    Returns ``(grads, dx)``: per-layer parameter gradients shaped like
    ``params`` and the gradient with respect to the input batch.
    """
    if trace.spec is not spec and trace.spec != spec:
        raise DomainError("trace was produced by a different model")
    if len(trace.params) != len(params) or any(
            len(a) != len(b) or any(x is not y for x, y in zip(a, b))
            for a, b in zip(trace.params, params)):
        raise DomainError("stale trace: parameters changed since the forward pass")
    d = np.asarray(dout, dtype=np.float64)
    grads = [()] * len(spec.layers)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, x, aux = spec.layers[i], trace.inputs[i], trace.aux[i]
        kind = layer.kind
        if kind == "conv2d":
            w, _ = params[i]
            cols, meta = aux
            n, _, ho, wo, _ = meta
            dmat = d.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)
            grads[i] = ((dmat.T @ cols).reshape(w.shape), dmat.sum(axis=0))
            d = _col2im(dmat @ w.reshape(w.shape[0], -1), meta, layer.kernel,
                        layer.stride, layer.padding)
        elif kind == "relu":
            d = d * (x > 0)
        elif kind == "dropout":
            if aux is not None:
                d = d * aux
        elif kind == "maxpool2d":
            n, c, h, w = x.shape
            blocks = np.zeros((n, c, h // 2, w // 2, 4))
            np.put_along_axis(blocks, aux[..., None], d[..., None], axis=-1)
            d = (blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
                 .reshape(n, c, h, w))
        elif kind == "flatten":
            d = d.reshape(x.shape)
        elif kind == "dense":
            w, _ = params[i]
            grads[i] = (x.T @ d, d.sum(axis=0))
            d = d @ w.T
    return grads, d


def loss_and_grad(logits, labels):
    """Mean softmax cross-entropy and its gradient with respect to ``logits``."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise DomainError("logits must be (batch, classes) with one label per row")
    if np.any((y < 0) | (y >= z.shape[1])) or not np.all(y == np.round(y)):
        raise DomainError(f"labels must be integers in [0, {z.shape[1]})")
    y = y.astype(np.int64)
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = -float(np.mean(logp[np.arange(n), y]))
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    return loss, d / n


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    zeros = [tuple(np.zeros_like(a) for a in layer) for layer in params]
    return AdamState(m=zeros, v=[tuple(np.zeros_like(a) for a in layer) for layer in params],
                     lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam. Returns ``(new_params, new_state)``."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p_l, g_l, m_l, v_l in zip(params, grads, state.m, state.v):
        if len(p_l) != len(g_l):
            raise DomainError("gradient structure does not match parameters")
        ps, ms, vs = [], [], []
        for p, g, m, v in zip(p_l, g_l, m_l, v_l):
            if p.shape != g.shape:
                raise DomainError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            ps.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
            ms.append(m)
            vs.append(v)
        new_p.append(tuple(ps))
        new_m.append(tuple(ms))
        new_v.append(tuple(vs))
    return new_p, replace(state, m=new_m, v=new_v, step=t)


def sgd_step(params, grads, lr: float):
    return [tuple(p - lr * g for p, g in zip(p_l, g_l)) for p_l, g_l in zip(params, grads)]


# ---------------------------------------------------------------------------
# splitting and accounting


def split_model(spec: ModelSpec, cut: int):
    """Client part ``layers[:cut]`` and server part ``layers[cut:]``."""
    if not 0 <= cut <= len(spec.layers):
        raise DomainError(f"cut {cut} outside [0, {len(spec.layers)}]")
    shapes = spec.shapes
    client = ModelSpec(spec.layers[:cut], spec.input_shape, spec.offset)
    server = ModelSpec(spec.layers[cut:], shapes[cut], spec.offset + cut)
    return client, server


def split_params(params, cut: int):
    return list(params[:cut]), list(params[cut:])


@dataclass(frozen=True)
class FlopCount:
    kind: str
    forward_flops: int
    backward_flops: int

    @property
    def total(self) -> int:
        return self.forward_flops + self.backward_flops


def count_flops(spec: ModelSpec, input_shape: Optional[Sequence[int]] = None) -> list:
    """Per-sample FLOPs of each layer.

    Convolution counts ``2 k^2 C_in C_out H_out W_out``, dense ``2 fan_in fan_out``
    (one multiply and one add per MAC; bias adds are not counted). ReLU,
    dropout and max-pooling cost one operation per input element and flatten
    is free. Backward costs twice the forward pass for layers with weights
    (input and weight gradients) and the same as forward otherwise.
    """
    shape = tuple(input_shape) if input_shape is not None else spec.input_shape
    out = []
    for layer in spec.layers:
        nxt = layer.output_shape(shape)
        if layer.kind == "conv2d":
            f = 2 * layer.kernel ** 2 * layer.in_channels * layer.out_channels * nxt[1] * nxt[2]
            b = 2 * f
        elif layer.kind == "dense":
            f = 2 * layer.fan_in * layer.fan_out
            b = 2 * f
        elif layer.kind == "flatten":
            f = b = 0
        else:
            f = b = int(np.prod(shape))
        out.append(FlopCount(layer.kind, int(f), int(b)))
        shape = nxt
    return out
