"""Minimal differentiable network engine (numpy, float64).

Supports sequential stacks of linear, conv2d, relu, maxpool2d and flatten
layers, which covers MLPs and LeNet-style CNNs. Every layer has a hand-written
backward pass; there is no general autograd graph.

Weight layout follows the usual conventions: linear weights are
``(out_features, in_features)``, conv weights ``(out_channels, in_channels,
k, k)``, and image batches are NCHW.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError

LAYER_KINDS = ("linear", "conv2d", "relu", "maxpool2d", "flatten")
WEIGHTED_KINDS = ("linear", "conv2d")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    pool_size: int = 0

    @property
    def weighted(self) -> bool:
        return self.kind in WEIGHTED_KINDS

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v or k == "kind"}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def linear(in_features, out_features):
    return LayerSpec("linear", in_features=in_features, out_features=out_features)


def conv2d(in_channels, out_channels, kernel_size, stride=1, padding=0):
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel_size=kernel_size, stride=stride, padding=padding)


def relu():
    return LayerSpec("relu")


def maxpool2d(pool_size=2):
    return LayerSpec("maxpool2d", pool_size=pool_size)


def flatten():
    return LayerSpec("flatten")


def _output_shape(spec: LayerSpec, shape: tuple, index: int) -> tuple:
    where = f"layer {index} ({spec.kind})"
    if spec.kind == "linear":
        if shape != (spec.in_features,):
            raise ConfigError(f"{where}: expects ({spec.in_features},) input, got {shape}")
        return (spec.out_features,)
    if spec.kind == "conv2d":
        if len(shape) != 3 or shape[0] != spec.in_channels:
            raise ConfigError(f"{where}: expects ({spec.in_channels}, H, W) input, got {shape}")
        k, s, p = spec.kernel_size, spec.stride, spec.padding
        ho = (shape[1] + 2 * p - k) // s + 1
        wo = (shape[2] + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ConfigError(f"{where}: kernel {k} does not fit input {shape}")
        return (spec.out_channels, ho, wo)
    if spec.kind == "relu":
        return shape
    if spec.kind == "maxpool2d":
        if len(shape) != 3 or shape[1] < spec.pool_size or shape[2] < spec.pool_size:
            raise ConfigError(f"{where}: cannot pool input {shape}")
        return (shape[0], shape[1] // spec.pool_size, shape[2] // spec.pool_size)
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    raise ConfigError(f"{where}: unknown layer kind")


@dataclass(frozen=True)
class Network:
    """A sequential topology plus the per-sample input shape.

    ``act_bits`` enables activation quantization after every relu once the
    weights carry calibrated ranges (see :func:`calibrate_activations`).
    """

    layers: tuple
    input_shape: tuple
    act_bits: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        for i, spec in enumerate(self.layers):
            if spec.kind not in LAYER_KINDS:
                raise ConfigError(f"layer {i}: unknown kind {spec.kind!r}")
            if spec.kind == "linear":
                dims = (spec.in_features, spec.out_features)
            elif spec.kind == "conv2d":
                dims = (spec.in_channels, spec.out_channels, spec.kernel_size, spec.stride,
                        spec.padding + 1)
            elif spec.kind == "maxpool2d":
                dims = (spec.pool_size,)
            else:
                dims = ()
            if any(d <= 0 for d in dims):
                raise ConfigError(f"layer {i}: dimensions must be positive")
        if self.act_bits is not None and self.act_bits < 1:
            raise ConfigError("act_bits must be >= 1")
        shapes = [self.input_shape]
        for i, spec in enumerate(self.layers):
            shapes.append(_output_shape(spec, shapes[-1], i))
        if len(shapes[-1]) != 1:
            raise ConfigError(f"network must end in a flat output, got {shapes[-1]}")
        object.__setattr__(self, "_shapes", tuple(shapes))

    @property
    def num_classes(self) -> int:
        return self._shapes[-1][0]

    @property
    def weighted_layers(self) -> list:
        return [s for s in self.layers if s.weighted]

    @property
    def num_relus(self) -> int:
        return sum(s.kind == "relu" for s in self.layers)

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "act_bits": self.act_bits,
                "layers": [s.to_dict() for s in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        return cls(tuple(LayerSpec.from_dict(s) for s in d["layers"]),
                   tuple(d["input_shape"]), d.get("act_bits"))


def mlp(sizes: Sequence[int], act_bits=None) -> Network:
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(linear(a, b))
        if i < len(sizes) - 2:
            layers.append(relu())
    return Network(tuple(layers), (sizes[0],), act_bits)


def lenet(num_classes=10, in_channels=1, image_size=28, act_bits=None) -> Network:
    """Two conv + pool stages followed by three fully connected layers."""
    side = ((image_size - 4) // 2 - 4) // 2
    layers = (
        conv2d(in_channels, 6, 5), relu(), maxpool2d(2),
        conv2d(6, 16, 5), relu(), maxpool2d(2),
        flatten(),
        linear(16 * side * side, 120), relu(),
        linear(120, 84), relu(),
        linear(84, num_classes),
    )
    return Network(layers, (in_channels, image_size, image_size), act_bits)


@dataclass
class LayerParams:
    weight: np.ndarray
    bias: np.ndarray
    max_abs: float

    @classmethod
    def from_arrays(cls, weight, bias) -> "LayerParams":
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        # floor keeps max_abs > 0 for all-zero tensors
        max_abs = max(float(np.abs(weight).max(initial=0.0)), np.finfo(np.float64).tiny)
        return cls(weight, bias, max_abs)


@dataclass
class NetworkWeights:
    """Parameters of every weighted layer, in network order.

    ``act_ranges`` holds one frozen ``(lo, hi)`` range per relu once the
    activations have been calibrated; ``None`` means float activations.
    """

    layers: list
    act_ranges: list | None = None

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(
            [LayerParams(p.weight.copy(), p.bias.copy(), p.max_abs) for p in self.layers],
            None if self.act_ranges is None else list(self.act_ranges),
        )

    def with_weights(self, new_weights) -> "NetworkWeights":
        """Replace the weight tensors, keeping biases, max_abs and act ranges."""
        return NetworkWeights(
            [LayerParams(w, p.bias, p.max_abs) for w, p in zip(new_weights, self.layers)],
            self.act_ranges,
        )

    def num_weights(self) -> int:
        return sum(p.weight.size for p in self.layers)


class LayerGrad(NamedTuple):
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ConfigError(
                f"dataset has {len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx])


def init_weights(network: Network, rng: np.random.Generator) -> NetworkWeights:
    """He-style uniform init, U(-sqrt(6/fan_in), sqrt(6/fan_in)); zero biases."""
    layers = []
    for spec in network.weighted_layers:
        if spec.kind == "linear":
            shape = (spec.out_features, spec.in_features)
        else:
            k = spec.kernel_size
            shape = (spec.out_channels, spec.in_channels, k, k)
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        layers.append(LayerParams.from_arrays(rng.uniform(-bound, bound, size=shape),
                                              np.zeros(shape[0])))
    return NetworkWeights(layers)


def zero_weights(network: Network) -> NetworkWeights:
    w = init_weights(network, np.random.default_rng(0))
    return NetworkWeights([LayerParams.from_arrays(np.zeros_like(p.weight), np.zeros_like(p.bias))
                           for p in w.layers])


def _check_weights(network: Network, weights: NetworkWeights):
    specs = network.weighted_layers
    if len(specs) != len(weights.layers):
        raise ConfigError(f"network has {len(specs)} weighted layers, weights have "
                          f"{len(weights.layers)}")
    for i, (spec, p) in enumerate(zip(specs, weights.layers)):
        if spec.kind == "linear":
            want = (spec.out_features, spec.in_features)
        else:
            k = spec.kernel_size
            want = (spec.out_channels, spec.in_channels, k, k)
        if p.weight.shape != want or p.bias.shape != (want[0],):
            raise ConfigError(f"weighted layer {i}: expected weight {want}, got "
                              f"{p.weight.shape} / bias {p.bias.shape}")


def quantize_activations(t, bits: int, value_range=None) -> np.ndarray:
    """Clamp ``t`` to ``value_range`` and snap it onto ``2**bits`` uniform levels.

    Rounding is half-up. With no range given, the zero-anchored range of ``t``
    itself is used, ``(min(0, t.min()), max(0, t.max()))``.
    """
    if bits < 1:
        raise ConfigError("bits must be >= 1")
    t = np.asarray(t, dtype=np.float64)
    if value_range is None:
        lo = min(0.0, float(t.min(initial=0.0)))
        hi = max(0.0, float(t.max(initial=0.0)))
    else:
        lo, hi = value_range
    if hi <= lo:
        return np.full_like(t, lo)
    steps = 2 ** bits - 1
    scaled = (np.clip(t, lo, hi) - lo) * (steps / (hi - lo))
    return lo + np.floor(scaled + 0.5) * ((hi - lo) / steps)


# ---------------------------------------------------------------- layer kernels
#
# Internally image tensors are NHWC so that patch matrices and pooling need no
# transposes; the public API is NCHW and flatten emits NCHW order.

def _to_internal(x):
    return x.transpose(0, 2, 3, 1) if x.ndim == 4 else x


def _patches(x, k, stride, padding):
    """(n*ho*wo, c*k*k) patch matrix of an NHWC batch, columns ordered (c, ki, kj)."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    return win.reshape(n * ho * wo, -1), (n, ho, wo)


def _conv_forward(x, p, spec, patches=None):
    cols, (n, ho, wo) = patches if patches is not None else _patches(
        x, spec.kernel_size, spec.stride, spec.padding)
    co = p.weight.shape[0]
    out = cols @ p.weight.reshape(co, -1).T + p.bias
    return out.reshape(n, ho, wo, co), (cols, x.shape)


def _conv_backward(dout, weight, spec, cache, need_dx):
    cols, xshape = cache
    co, ci, k, _ = weight.shape
    s, pad = spec.stride, spec.padding
    n, ho, wo, _ = dout.shape
    dmat = dout.reshape(-1, co)
    dw = (dmat.T @ cols).reshape(weight.shape)
    db = dmat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    _, h, w, _ = xshape
    dcols = (dmat @ weight.reshape(co, -1)).reshape(n, ho, wo, ci, k, k)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, ci))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j]
    return (dxp[:, pad:pad + h, pad:pad + w] if pad else dxp), dw, db


def _pool_forward(x, size):
    ho, wo = x.shape[1] // size, x.shape[2] // size
    out = None
    for a in range(size):
        for b in range(size):
            sl = x[:, a:ho * size:size, b:wo * size:size]
            out = sl.copy() if out is None else np.maximum(out, sl, out=out)
    return out, (x, out)


def _pool_backward(dout, size, cache):
    x, out = cache
    ho, wo = out.shape[1:3]
    dx = np.zeros_like(x)
    taken = np.zeros(out.shape, dtype=bool)
    # route each gradient to the first maximal element in window order
    for a in range(size):
        for b in range(size):
            hit = (x[:, a:ho * size:size, b:wo * size:size] == out) & ~taken
            dx[:, a:ho * size:size, b:wo * size:size] = np.where(hit, dout, 0.0)
            taken |= hit
    return dx


def _run(network, weights, x, keep_cache, patches=None):
    quant = network.act_bits is not None and weights.act_ranges is not None
    caches = []
    wi = ri = 0
    for li, spec in enumerate(network.layers):
        cache = None
        if spec.kind == "linear":
            p = weights.layers[wi]
            wi += 1
            cache = x
            x = x @ p.weight.T + p.bias
        elif spec.kind == "conv2d":
            p = weights.layers[wi]
            wi += 1
            x, cache = _conv_forward(x, p, spec, patches if li == 0 else None)
        elif spec.kind == "relu":
            if keep_cache:
                cache = x > 0
                x = np.where(cache, x, 0.0)
            elif li > 0 and network.layers[li - 1].kind in ("linear", "conv2d", "maxpool2d"):
                # x is a fresh buffer here, never caller-owned input
                x = np.maximum(x, 0.0, out=x)
            else:
                x = np.maximum(x, 0.0)
            if quant:
                x = quantize_activations(x, network.act_bits, weights.act_ranges[ri])
            ri += 1
        elif spec.kind == "maxpool2d":
            x, cache = _pool_forward(x, spec.pool_size)
        else:
            cache = x.shape
            if x.ndim == 4:
                x = x.transpose(0, 3, 1, 2)
            x = x.reshape(len(x), -1)
        if keep_cache:
            if not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite activations after layer {li} ({spec.kind})")
            caches.append(cache)
    return x, caches


def _as_batch(network, batch):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == len(network.input_shape):
        x = x[None]
    if x.shape[1:] != network.input_shape:
        raise ConfigError(f"batch shape {x.shape[1:]} does not match network input "
                          f"{network.input_shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite values in input batch")
    return x


def forward(network: Network, weights: NetworkWeights, batch) -> np.ndarray:
    """Logits of shape (batch_size, num_classes)."""
    _check_weights(network, weights)
    x = _as_batch(network, batch)
    logits, _ = _run(network, weights, _to_internal(x), keep_cache=False)
    return logits


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n = len(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))
    dlogits = np.exp(z - lse[:, None])
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / n


def _check_labels(network, x, labels):
    if len(x) == 0:
        raise ConfigError("empty batch")
    if len(labels) != len(x):
        raise ConfigError("batch and labels differ in length")
    if labels.min() < 0 or labels.max() >= network.num_classes:
        raise ConfigError(f"labels must lie in [0, {network.num_classes})")


def loss(network: Network, weights: NetworkWeights, batch, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    logits = forward(network, weights, batch)
    _check_labels(network, logits, labels)
    return softmax_cross_entropy(logits, labels)[0]


def loss_and_grad(network: Network, weights: NetworkWeights, batch, labels):
    """Mean cross-entropy and its exact gradient w.r.t. every weight and bias.

    The gradient is taken at exactly the weights passed in, so callers doing
    noise injection pass the perturbed weights here. Activation quantization,
    if active, is treated as identity in the backward pass.
    """
    _check_weights(network, weights)
    x = _as_batch(network, batch)
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(network, x, labels)
    logits, caches = _run(network, weights, _to_internal(x), keep_cache=True)
    value, d = softmax_cross_entropy(logits, labels)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss after layer {len(network.layers) - 1}")
    grads = [None] * len(weights.layers)
    wi = len(weights.layers)
    for li in range(len(network.layers) - 1, -1, -1):
        spec, cache = network.layers[li], caches[li]
        if spec.kind == "linear":
            wi -= 1
            grads[wi] = LayerGrad(d.T @ cache, d.sum(axis=0))
            d = d @ weights.layers[wi].weight if li > 0 else None
        elif spec.kind == "conv2d":
            wi -= 1
            d, dw, db = _conv_backward(d, weights.layers[wi].weight, spec, cache, need_dx=li > 0)
            grads[wi] = LayerGrad(dw, db)
        elif spec.kind == "relu":
            d = d * cache
        elif spec.kind == "maxpool2d":
            d = _pool_backward(d, spec.pool_size, cache)
        elif len(cache) == 4:
            n, h, w, c = cache
            d = d.reshape(n, c, h, w).transpose(0, 2, 3, 1)
        else:
            d = d.reshape(cache)
        if spec.weighted and not (np.all(np.isfinite(grads[wi].weight))
                                  and np.all(np.isfinite(grads[wi].bias))):
            raise NumericError(f"non-finite gradient in layer {li} ({spec.kind})")
    return value, grads


def sgd_step(weights: NetworkWeights, grads, lr: float) -> NetworkWeights:
    """Return ``w - lr * g`` for every tensor; max_abs is refreshed."""
    if len(grads) != len(weights.layers):
        raise ConfigError("gradient structure does not match weights")
    layers = []
    for p, g in zip(weights.layers, grads):
        if g.weight.shape != p.weight.shape or g.bias.shape != p.bias.shape:
            raise ConfigError("gradient shape does not match weight shape")
        layers.append(LayerParams.from_arrays(p.weight - lr * g.weight, p.bias - lr * g.bias))
    return NetworkWeights(layers, weights.act_ranges)


class Evaluator:
    """Repeated accuracy evaluation of one network on one fixed dataset.

    The inputs are converted and split into chunks once; when the first
    layer is a convolution its patch matrices are cached as well (up to
    ``cache_bytes``), since they do not depend on the weights. Used by the
    Monte-Carlo estimators, which evaluate thousands of weight draws.
    """

    def __init__(self, network: Network, dataset: Dataset, batch_size=250,
                 cache_bytes=600 * 2**20):
        if len(dataset) == 0:
            raise ConfigError("cannot evaluate on an empty dataset")
        self.network = network
        self.labels = dataset.labels
        x = _to_internal(_as_batch(network, dataset.inputs))
        first = network.layers[0]
        patch_bytes = 0
        if first.kind == "conv2d":
            ho = network._shapes[1][1]
            wo = network._shapes[1][2]
            patch_bytes = len(x) * ho * wo * first.in_channels * first.kernel_size**2 * 8
        use_patches = first.kind == "conv2d" and patch_bytes <= cache_bytes
        self._chunks = []
        for lo in range(0, len(x), batch_size):
            xc = np.ascontiguousarray(x[lo:lo + batch_size])
            if use_patches:
                cols, dims = _patches(xc, first.kernel_size, first.stride, first.padding)
                self._chunks.append((xc, (np.ascontiguousarray(cols), dims)))
            else:
                self._chunks.append((xc, None))

    def predict(self, weights: NetworkWeights) -> np.ndarray:
        _check_weights(self.network, weights)
        out = [_run(self.network, weights, xc, False, patches)[0].argmax(axis=1)
               for xc, patches in self._chunks]
        return np.concatenate(out)

    def accuracy(self, weights: NetworkWeights) -> float:
        correct = np.count_nonzero(self.predict(weights) == self.labels)
        return float(correct) / len(self.labels)


def predict(network: Network, weights: NetworkWeights, inputs, batch_size=250) -> np.ndarray:
    """Argmax class per input; ties go to the lowest class index."""
    _check_weights(network, weights)
    x = _to_internal(_as_batch(network, inputs))
    out = [_run(network, weights, x[lo:lo + batch_size], False)[0].argmax(axis=1)
           for lo in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def evaluate_accuracy(network: Network, weights: NetworkWeights, dataset: Dataset,
                      batch_size=250) -> float:
    """Fraction of argmax-correct predictions (ties: lowest class index)."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    pred = predict(network, weights, dataset.inputs, batch_size)
    return float(np.count_nonzero(pred == dataset.labels)) / len(dataset)


def calibrate_activations(network: Network, weights: NetworkWeights, batch) -> NetworkWeights:
    """Copy of ``weights`` with a frozen (0, max) range recorded for every relu.

    The ranges come from one float-activation pass over ``batch``.
    """
    x = _to_internal(_as_batch(network, batch))
    out = weights.copy()
    out.act_ranges = None
    ranges = []
    wi = 0
    for spec in network.layers:
        if spec.kind == "linear":
            x = x @ out.layers[wi].weight.T + out.layers[wi].bias
            wi += 1
        elif spec.kind == "conv2d":
            x, _ = _conv_forward(x, out.layers[wi], spec)
            wi += 1
        elif spec.kind == "relu":
            x = np.maximum(x, 0.0)
            ranges.append((0.0, float(x.max(initial=0.0))))
        elif spec.kind == "maxpool2d":
            x, _ = _pool_forward(x, spec.pool_size)
        else:
            if x.ndim == 4:
                x = x.transpose(0, 3, 1, 2)
            x = x.reshape(len(x), -1)
    out.act_ranges = ranges
    return out
