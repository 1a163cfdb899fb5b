"""Layer graph, forward pass, per-layer backward contracts and SGD.

Backward passes are written by hand for the fixed layer set. Weighted layers
(``Conv2d``, ``Linear``) take the matrix that carries the error backward as
an argument, which is where feedback substitutes plug in. Every other layer,
batch norm included, back-propagates its exact gradient.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .stats import keyed_generator

__all__ = [
    "LayerSpec",
    "NetworkConfig",
    "Network",
    "ForwardTrace",
    "BuildError",
    "NumericError",
    "StateError",
    "CheckpointError",
    "LAYER_KINDS",
    "WEIGHTED_KINDS",
    "LOSS_KINDS",
    "build_network",
    "forward",
    "loss_error",
    "backward_error",
    "weight_grad",
    "sgd_step",
    "backward_pass",
    "save_checkpoint",
    "load_checkpoint",
    "state_checksum",
]

WEIGHTED_KINDS = ("Conv2d", "Linear")
LOSS_KINDS = ("SoftmaxCrossEntropy", "MSEOutput")
LAYER_KINDS = WEIGHTED_KINDS + ("ReLU", "BatchNorm", "MaxPool2d") + LOSS_KINDS

MAGIC = b"EFGD"
FORMAT_VERSION = 1


class BuildError(ValueError):
    """Layer chain cannot be assembled."""


class NumericError(FloatingPointError):
    def __init__(self, message: str, layer_index: int | None = None):
        super().__init__(message)
        self.layer_index = layer_index


class StateError(RuntimeError):
    """An operation was called without the state it depends on."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed."""


@dataclass
class LayerSpec:
    kind: str
    out_channels: int | None = None
    in_channels: int | None = None
    kernel_size: int | None = None
    stride: int | None = None
    pad: int = 0
    in_features: int | None = None
    out_features: int | None = None
    bias: bool = True
    momentum: float = 0.1
    eps: float = 1e-5
    activation: str = "identity"

    @property
    def weighted(self) -> bool:
        return self.kind in WEIGHTED_KINDS

    @property
    def trainable(self) -> bool:
        return self.kind in WEIGHTED_KINDS or self.kind == "BatchNorm"

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise BuildError(f"unknown layer keys {sorted(unknown)} for {d.get('kind')}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}


@dataclass
class NetworkConfig:
    input_shape: tuple[int, ...]
    layers: list[LayerSpec]
    dtype: str = "float32"

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        unknown = set(d) - {"input_shape", "layers", "dtype"}
        if unknown:
            raise BuildError(f"unknown network keys {sorted(unknown)}")
        layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l) for l in d["layers"]]
        return cls(tuple(d["input_shape"]), layers, d.get("dtype", "float32"))

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
            "dtype": self.dtype,
        }


@dataclass
class Network:
    config: NetworkConfig
    seed: int
    shapes: list[tuple[int, ...]]
    params: list[dict[str, np.ndarray]]
    buffers: list[dict[str, np.ndarray]]
    velocity: list[dict[str, np.ndarray]] = field(default_factory=list)

    @property
    def layers(self) -> list[LayerSpec]:
        return self.config.layers

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.dtype)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.config.input_shape)

    def weighted_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.weighted]

    def layer_input_shape(self, i: int) -> tuple[int, ...]:
        return self.input_shape if i == 0 else self.shapes[i - 1]


@dataclass
class ForwardTrace:
    """Per-layer inputs and cached intermediates from one forward pass."""

    inputs: list[np.ndarray]
    cache: list[dict[str, Any]]
    labels: np.ndarray | None
    output: np.ndarray
    training: bool


def _resolve_chain(cfg: NetworkConfig) -> list[tuple[int, ...]]:
    layers = cfg.layers
    if not layers:
        raise BuildError("network has no layers")
    loss_idx = [i for i, l in enumerate(layers) if l.kind in LOSS_KINDS]
    if loss_idx != [len(layers) - 1]:
        raise BuildError(f"exactly one loss layer is required, at the end; found at {loss_idx}")
    shape = tuple(int(s) for s in cfg.input_shape)
    if not shape or any(s < 1 for s in shape):
        raise BuildError(f"input shape must have positive extents, got {shape}")
    shapes = []
    for i, l in enumerate(layers):
        if l.kind not in LAYER_KINDS:
            raise BuildError(f"layer {i}: unknown kind {l.kind!r}")
        if l.kind == "Conv2d":
            if len(shape) != 3:
                raise BuildError(f"layer {i}: Conv2d needs a (C,H,W) input, got {shape}")
            if l.out_channels is None or l.kernel_size is None:
                raise BuildError(f"layer {i}: Conv2d needs out_channels and kernel_size")
            if l.in_channels is None:
                l.in_channels = shape[0]
            if l.in_channels != shape[0]:
                raise BuildError(f"layer {i}: Conv2d expects {l.in_channels} channels, receives {shape[0]}")
            if l.stride is None:
                l.stride = 1
            try:
                ho = T.conv_output_size(shape[1], l.kernel_size, l.stride, l.pad, "H")
                wo = T.conv_output_size(shape[2], l.kernel_size, l.stride, l.pad, "W")
            except T.DimensionError as exc:
                raise BuildError(f"layer {i}: {exc}") from None
            shape = (l.out_channels, ho, wo)
        elif l.kind == "Linear":
            flat = int(np.prod(shape))
            if l.out_features is None:
                raise BuildError(f"layer {i}: Linear needs out_features")
            if l.in_features is None:
                l.in_features = flat
            if l.in_features != flat:
                raise BuildError(f"layer {i}: Linear expects {l.in_features} features, receives {flat}")
            shape = (l.out_features,)
        elif l.kind == "MaxPool2d":
            if len(shape) != 3 or l.kernel_size is None:
                raise BuildError(f"layer {i}: MaxPool2d needs kernel_size and a (C,H,W) input")
            if l.stride is None:
                l.stride = l.kernel_size
            try:
                ho = T.conv_output_size(shape[1], l.kernel_size, l.stride, 0, "H")
                wo = T.conv_output_size(shape[2], l.kernel_size, l.stride, 0, "W")
            except T.DimensionError as exc:
                raise BuildError(f"layer {i}: {exc}") from None
            shape = (shape[0], ho, wo)
        elif l.kind == "BatchNorm":
            if l.eps <= 0 or not 0 <= l.momentum <= 1:
                raise BuildError(f"layer {i}: BatchNorm needs eps > 0 and momentum in [0,1]")
        elif l.kind in LOSS_KINDS:
            if len(shape) != 1:
                raise BuildError(f"layer {i}: {l.kind} needs a flat (features,) input, got {shape}")
            if l.kind == "MSEOutput" and l.activation not in ("identity", "sigmoid"):
                raise BuildError(f"layer {i}: unsupported MSEOutput activation {l.activation!r}")
        shapes.append(shape)
    return shapes


def build_network(config: NetworkConfig | dict, seed: int = 0) -> Network:
    """Validate the layer chain and initialize parameters.

    Weights are Kaiming-uniform over fan-in, biases zero, batch-norm scale one
    and shift zero. Each layer draws from its own stream keyed by
    ``(seed, layer index)``.
    """
    if isinstance(config, dict):
        config = NetworkConfig.from_dict(config)
    config = NetworkConfig(tuple(config.input_shape), [dataclasses.replace(l) for l in config.layers], config.dtype)
    dtype = np.dtype(config.dtype)
    if dtype not in (np.float32, np.float64):
        raise BuildError(f"dtype must be float32 or float64, got {config.dtype}")
    shapes = _resolve_chain(config)
    params, buffers = [], []
    for i, l in enumerate(config.layers):
        p, b = {}, {}
        if l.weighted:
            if l.kind == "Conv2d":
                wshape = (l.out_channels, l.in_channels, l.kernel_size, l.kernel_size)
                nout = l.out_channels
            else:
                wshape = (l.out_features, l.in_features)
                nout = l.out_features
            p["weight"] = kaiming_uniform(wshape, keyed_generator(seed, 0, i)).astype(dtype)
            if l.bias:
                p["bias"] = np.zeros(nout, dtype=dtype)
        elif l.kind == "BatchNorm":
            c = (config.input_shape if i == 0 else shapes[i - 1])[0]
            p["gamma"] = np.ones(c, dtype=dtype)
            p["beta"] = np.zeros(c, dtype=dtype)
            b["running_mean"] = np.zeros(c, dtype=dtype)
            b["running_var"] = np.ones(c, dtype=dtype)
        params.append(p)
        buffers.append(b)
    net = Network(config, int(seed), shapes, params, buffers)
    net.velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
    return net


def kaiming_uniform(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _onehot(labels: np.ndarray, n: int, dtype) -> np.ndarray:
    out = np.zeros((labels.shape[0], n), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def _targets(labels: np.ndarray, n: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels.astype(dtype)
    return _onehot(labels.astype(np.int64), n, dtype)


def _layer_forward(net: Network, i: int, x: np.ndarray, training: bool, cache: dict) -> np.ndarray:
    l = net.layers[i]
    p = net.params[i]
    if l.kind == "Conv2d":
        out = T.conv2d_forward(x, p["weight"], l.stride, l.pad)
        if "bias" in p:
            out += p["bias"][None, :, None, None]
        return out
    if l.kind == "Linear":
        out = x.reshape(x.shape[0], -1) @ p["weight"].T
        if "bias" in p:
            out += p["bias"]
        return out
    if l.kind == "ReLU":
        out = np.maximum(x, 0)
        cache["mask"] = x > 0
        return out
    if l.kind == "BatchNorm":
        return _bn_forward(net, i, x, training, cache)
    if l.kind == "MaxPool2d":
        return _pool_forward(x, l.kernel_size, l.stride, cache)
    if l.kind == "SoftmaxCrossEntropy":
        z = x.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        prob = e / e.sum(axis=1, keepdims=True)
        cache["prob"] = prob
        return prob.astype(x.dtype)
    if l.kind == "MSEOutput":
        a = x if l.activation == "identity" else 1.0 / (1.0 + np.exp(-x))
        cache["a"] = a
        return a
    raise BuildError(f"layer {i}: unknown kind {l.kind!r}")


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    return (0, 2, 3) if x.ndim == 4 else (0,)


def _bshape(x: np.ndarray) -> tuple[int, ...]:
    return (1, -1, 1, 1) if x.ndim == 4 else (1, -1)


def _bn_forward(net: Network, i: int, x: np.ndarray, training: bool, cache: dict) -> np.ndarray:
    l = net.layers[i]
    p, b = net.params[i], net.buffers[i]
    axes, bs = _bn_axes(x), _bshape(x)
    if training:
        m = x.size // x.shape[1]
        mean = np.mean(x, axis=axes, dtype=np.float64)
        var = np.mean(np.square(x - mean.reshape(bs).astype(x.dtype), dtype=np.float64), axis=axes)
        b["running_mean"][:] = (1 - l.momentum) * b["running_mean"] + l.momentum * mean
        unbiased = var * m / max(m - 1, 1)
        b["running_var"][:] = (1 - l.momentum) * b["running_var"] + l.momentum * unbiased
    else:
        mean = b["running_mean"].astype(np.float64)
        var = b["running_var"].astype(np.float64)
    inv_std = (1.0 / np.sqrt(var + l.eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype).reshape(bs)) * inv_std.reshape(bs)
    cache["xhat"] = xhat
    cache["inv_std"] = inv_std
    cache["batch_stats"] = training
    return xhat * p["gamma"].reshape(bs) + p["beta"].reshape(bs)


def _pool_windows(x: np.ndarray, k: int, s: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    n, c, ho, wo = win.shape[:4]
    return win.reshape(n, c, ho, wo, k * k)


def _pool_forward(x: np.ndarray, k: int, s: int, cache: dict) -> np.ndarray:
    win = _pool_windows(x, k, s)
    idx = np.argmax(win, axis=-1)
    cache["argmax"] = idx
    cache["in_shape"] = x.shape
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]


def _pool_backward(delta: np.ndarray, k: int, s: int, cache: dict) -> np.ndarray:
    n, c, h, w = cache["in_shape"]
    idx = cache["argmax"]
    _, _, ho, wo = idx.shape
    out = np.zeros((n, c, h, w), dtype=delta.dtype)
    di, dj = np.divmod(idx, k)
    rows = di + (np.arange(ho) * s)[None, None, :, None]
    cols = dj + (np.arange(wo) * s)[None, None, None, :]
    flat = (rows * w + cols).reshape(n, c, -1)
    target = out.reshape(n, c, -1)
    if s >= k:
        # windows do not overlap, so each input cell is hit at most once
        np.put_along_axis(target, flat, delta.reshape(n, c, -1), axis=-1)
    else:
        for a in range(n):
            for ch in range(c):
                np.add.at(target[a, ch], flat[a, ch], delta[a, ch].ravel())
    return out


def forward(
    net: Network, batch: np.ndarray, labels=None, training: bool = True
) -> tuple[float, ForwardTrace, np.ndarray]:
    """Run the forward pass; returns ``(loss, trace, predictions)``.

    ``predictions`` are class probabilities for cross-entropy outputs and the
    output activations for MSE outputs. Loss is ``nan`` when no labels are
    given.
    """
    batch = np.asarray(batch)
    if tuple(batch.shape[1:]) != net.input_shape:
        raise T.DimensionError(f"batch shape {batch.shape[1:]} does not match network input {net.input_shape}")
    x = batch.astype(net.dtype, copy=False)
    inputs, caches = [], []
    # non-finite values are reported through NumericError instead of warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(len(net.layers)):
            inputs.append(x)
            cache: dict[str, Any] = {}
            x = _layer_forward(net, i, x, training, cache)
            caches.append(cache)
    trace = ForwardTrace(inputs, caches, None if labels is None else np.asarray(labels), x, training)
    loss = math.nan
    if labels is not None:
        loss = _loss_value(net, trace)
        if not math.isfinite(loss):
            bad = next(
                (i for i, a in enumerate(inputs[1:] + [x]) if not np.all(np.isfinite(a))),
                len(net.layers) - 1,
            )
            raise NumericError(f"non-finite loss; first non-finite activation at layer {bad}", bad)
    return loss, trace, x


def _loss_value(net: Network, trace: ForwardTrace) -> float:
    l = net.layers[-1]
    cache = trace.cache[-1]
    n_out = net.shapes[-1][0]
    y = trace.labels
    if l.kind == "SoftmaxCrossEntropy":
        prob = cache["prob"]
        y = np.asarray(y, dtype=np.int64)
        picked = prob[np.arange(y.shape[0]), y]
        with np.errstate(divide="ignore"):
            return float(-np.mean(np.log(picked)))
    a = cache["a"].astype(np.float64)
    target = _targets(y, n_out, np.float64)
    return float(0.5 * np.sum(np.square(a - target)) / a.shape[0])


def loss_error(net: Network, trace: ForwardTrace) -> np.ndarray:
    """Error emitted by the loss layer, already divided by the batch size."""
    if trace.labels is None:
        raise StateError("trace carries no labels")
    l = net.layers[-1]
    cache = trace.cache[-1]
    n = trace.output.shape[0]
    n_out = net.shapes[-1][0]
    if l.kind == "SoftmaxCrossEntropy":
        e = (cache["prob"] - _onehot(np.asarray(trace.labels, dtype=np.int64), n_out, np.float64)) / n
        return e.astype(net.dtype)
    a = cache["a"]
    e = a - _targets(trace.labels, n_out, a.dtype)
    if l.activation == "sigmoid":
        e = e * (a * (1 - a))
    return (e / n).astype(net.dtype)


def backward_error(
    net: Network,
    index: int,
    delta_in: np.ndarray | None,
    trace: ForwardTrace | None,
    modulatory: np.ndarray | None = None,
) -> np.ndarray:
    """Error at the input of layer ``index`` given the error at its output.

    For weighted layers ``modulatory`` is the matrix used in place of the
    layer's weights (same shape as the weights); it defaults to the weights
    themselves, which gives exact back propagation. For the loss layer
    ``delta_in`` is ignored and the loss error is returned.
    """
    if trace is None or index >= len(trace.cache):
        raise StateError(f"no forward trace for layer {index}")
    l = net.layers[index]
    cache = trace.cache[index]
    x = trace.inputs[index]
    if l.kind in LOSS_KINDS:
        return loss_error(net, trace)
    if delta_in is None:
        raise StateError(f"layer {index}: missing upstream error")
    if l.kind == "Conv2d":
        m = net.params[index]["weight"] if modulatory is None else modulatory
        return T.conv2d_input_grad(delta_in, m, l.stride, l.pad, x.shape[2:])
    if l.kind == "Linear":
        m = net.params[index]["weight"] if modulatory is None else modulatory
        return (delta_in @ m).reshape(x.shape)
    if l.kind == "ReLU":
        return delta_in * cache["mask"]
    if l.kind == "MaxPool2d":
        return _pool_backward(delta_in, l.kernel_size, l.stride, cache)
    if l.kind == "BatchNorm":
        gamma = net.params[index]["gamma"]
        bs, axes = _bshape(x), _bn_axes(x)
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        dxhat = delta_in * gamma.reshape(bs)
        if not cache["batch_stats"]:
            return dxhat * inv_std.reshape(bs)
        m = x.size // x.shape[1]
        s1 = np.sum(dxhat, axis=axes, dtype=np.float64).astype(x.dtype).reshape(bs)
        s2 = np.sum(dxhat * xhat, axis=axes, dtype=np.float64).astype(x.dtype).reshape(bs)
        return (inv_std.reshape(bs) / m) * (m * dxhat - s1 - xhat * s2)
    raise StateError(f"layer {index}: unknown kind {l.kind!r}")


def backward_pass(net: Network, trace: ForwardTrace, modulatory=None, prune=None):
    """Walk the errors from the loss down to the first layer.

    ``modulatory(i, w)`` returns the matrix used in place of weighted layer
    ``i``'s weights; ``prune(i, delta)`` returns ``(delta_hat, stats)`` and is
    applied to the error at the output of every weighted layer except the
    topmost one, whose error is the unpruned loss error. Returns the error at
    each layer's output (``None`` for the loss layer) and the prune stats by
    layer.
    """
    n = len(net.layers)
    weighted = net.weighted_layers()
    top = weighted[-1] if weighted else -1
    deltas: list[np.ndarray | None] = [None] * n
    stats = {}
    d = loss_error(net, trace)
    for i in range(n - 2, -1, -1):
        l = net.layers[i]
        if l.weighted and prune is not None and i != top:
            d, stats[i] = prune(i, d)
        deltas[i] = d
        if i == 0:
            break
        m = None
        if l.weighted and modulatory is not None:
            m = modulatory(i, net.params[i]["weight"])
        d = backward_error(net, i, d, trace, m)
    return deltas, stats


def weight_grad(net: Network, index: int, delta: np.ndarray, trace: ForwardTrace) -> dict[str, np.ndarray]:
    """Gradients of the true parameters of layer ``index`` from the error at its output."""
    if trace is None or index >= len(trace.inputs):
        raise StateError(f"no forward trace for layer {index}")
    l = net.layers[index]
    x = trace.inputs[index]
    p = net.params[index]
    g: dict[str, np.ndarray] = {}
    if l.kind == "Conv2d":
        g["weight"] = T.conv2d_weight_grad(x, delta, l.stride, l.pad, l.kernel_size)
        if "bias" in p:
            g["bias"] = np.sum(delta, axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
    elif l.kind == "Linear":
        g["weight"] = delta.T @ x.reshape(x.shape[0], -1)
        if "bias" in p:
            g["bias"] = np.sum(delta, axis=0, dtype=np.float64).astype(x.dtype)
    elif l.kind == "BatchNorm":
        axes = _bn_axes(x)
        g["gamma"] = np.sum(delta * trace.cache[index]["xhat"], axis=axes, dtype=np.float64).astype(x.dtype)
        g["beta"] = np.sum(delta, axis=axes, dtype=np.float64).astype(x.dtype)
    return g


def sgd_step(net: Network, grads: list[dict[str, np.ndarray] | None], lr: float, momentum: float) -> None:
    """Classic momentum: ``v = momentum * v + grad``; ``w = w - lr * v``."""
    if len(grads) != len(net.params):
        raise T.DimensionError(f"expected {len(net.params)} gradient entries, got {len(grads)}")
    dtype = net.dtype
    mu, gamma = dtype.type(momentum), dtype.type(lr)
    for i, g in enumerate(grads):
        if not net.params[i]:
            continue
        if g is None or set(g) != set(net.params[i]):
            raise T.DimensionError(f"layer {i}: gradients for {sorted(net.params[i])} required")
        for k, w in net.params[i].items():
            if g[k].shape != w.shape:
                raise T.DimensionError(f"layer {i} {k}: gradient shape {g[k].shape} != {w.shape}")
            v = net.velocity[i][k]
            v *= mu
            v += g[k].astype(dtype, copy=False)
            w -= gamma * v


def _named_arrays(net: Network) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, p in enumerate(net.params):
        out.extend((f"{i}.{k}", v) for k, v in p.items())
    for i, b in enumerate(net.buffers):
        out.extend((f"{i}.{k}", v) for k, v in b.items())
    return out


def state_checksum(net: Network, include_velocity: bool = True) -> str:
    """SHA-256 over parameters, buffers and (optionally) momentum buffers."""
    h = hashlib.sha256()
    arrays = _named_arrays(net)
    if include_velocity:
        for i, v in enumerate(net.velocity):
            arrays.extend((f"{i}.v.{k}", a) for k, a in v.items())
    for name, a in arrays:
        h.update(name.encode())
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def save_checkpoint(net: Network, path: str | Path) -> None:
    """Write ``net`` as magic, u32 version, u32 header length, JSON header, float32 arrays."""
    arrays = _named_arrays(net)
    header = {
        "network": net.config.to_dict(),
        "seed": net.seed,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(hb)))
        f.write(hb)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Network:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, found {data[:4]!r}")
    if len(data) < 12:
        raise CheckpointError("truncated checkpoint header at offset 4")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header at offset 12: {exc}") from None
    net = build_network(NetworkConfig.from_dict(header["network"]), header["seed"])
    lookup = dict(_named_arrays(net))
    offset = 12 + hlen
    for entry in header["arrays"]:
        target = lookup.get(entry["name"])
        if target is None or list(target.shape) != entry["shape"]:
            raise CheckpointError(f"array {entry['name']} does not match the network layout")
        nbytes = target.size * 4
        if offset + nbytes > len(data):
            raise CheckpointError(f"truncated array {entry['name']} at offset {offset}")
        target[...] = np.frombuffer(data, dtype="<f4", count=target.size, offset=offset).reshape(target.shape)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes at offset {offset}")
    return net
