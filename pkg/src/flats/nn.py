"""Small numpy neural-network engine.

Models are immutable values: an :class:`Architecture` (layer list plus
input shape) and a :class:`ParameterSet`. All operations are pure functions
returning new arrays, so separate clients can train on separate threads.

Arrays are float32 by default. Every operation computes in the dtype of the
parameters, which lets gradient checks run the same code in float64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, FormatError, InputError

DTYPE = np.float32


# ---------------------------------------------------------------- layers


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel: int = 3
    padding: int = 1


@dataclass(frozen=True)
class MaxPool2d:
    """2x2 max pooling with stride 2."""


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_features: int


Layer = Conv2d | MaxPool2d | ReLU | Flatten | Dense


@dataclass(frozen=True)
class Architecture:
    """Layer list applied to inputs of shape ``input_shape`` (C, H, W)."""

    input_shape: tuple[int, int, int]
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.output_shapes()  # validates

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes (without batch dim). Raises ConfigError if they do not compose."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input shape must be positive (C, H, W), got {self.input_shape}")
        if not self.layers:
            raise ConfigError("architecture has no layers")
        shape: tuple[int, ...] = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                if len(shape) != 3:
                    raise ConfigError(f"layer {i}: Conv2d needs a (C, H, W) input, got {shape}")
                c, h, w = shape
                k, p = layer.kernel, layer.padding
                ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
                if layer.out_channels < 1 or k < 1 or p < 0 or ho < 1 or wo < 1:
                    raise ConfigError(f"layer {i}: Conv2d {layer} does not fit input {shape}")
                shape = (layer.out_channels, ho, wo)
            elif isinstance(layer, MaxPool2d):
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ConfigError(f"layer {i}: MaxPool2d needs even H and W, got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif isinstance(layer, ReLU):
                pass
            elif isinstance(layer, Flatten):
                shape = (math.prod(shape),)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ConfigError(f"layer {i}: Dense needs a flat input, got {shape}")
                if layer.out_features < 1:
                    raise ConfigError(f"layer {i}: Dense needs out_features >= 1")
                shape = (layer.out_features,)
            else:
                raise ConfigError(f"layer {i}: unknown layer type {type(layer).__name__}")
            shapes.append(shape)
        if len(shape) != 1 or not isinstance(self.layers[-1], Dense):
            raise ConfigError("architecture must end with a Dense layer producing class logits")
        return shapes

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_features

    def param_specs(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, fan_in) for every parameter, in canonical order."""
        specs = []
        shape: tuple[int, ...] = self.input_shape
        for i, (layer, out) in enumerate(zip(self.layers, self.output_shapes())):
            if isinstance(layer, Conv2d):
                fan_in = shape[0] * layer.kernel * layer.kernel
                specs.append((f"conv{i}.weight", (layer.out_channels, shape[0], layer.kernel, layer.kernel), fan_in))
                specs.append((f"conv{i}.bias", (layer.out_channels,), fan_in))
            elif isinstance(layer, Dense):
                specs.append((f"dense{i}.weight", (layer.out_features, shape[0]), shape[0]))
                specs.append((f"dense{i}.bias", (layer.out_features,), shape[0]))
            shape = out
        return specs


def small_cnn(input_shape=(1, 32, 32), n_classes=10, channels=(8, 16), hidden=64) -> Architecture:
    """Two conv+pool+relu blocks, one hidden dense layer, linear head.

    Pooling runs before the ReLU; the two commute and the ReLU is then
    applied to a quarter of the activations.
    """
    layers: list = []
    for c in channels:
        layers += [Conv2d(c, 3, 1), MaxPool2d(), ReLU()]
    layers += [Flatten(), Dense(hidden), ReLU(), Dense(n_classes)]
    return Architecture(tuple(input_shape), tuple(layers))


def mlp(input_shape=(1, 32, 32), n_classes=10, hidden=(128,)) -> Architecture:
    layers: list = [Flatten()]
    for h in hidden:
        layers += [Dense(h), ReLU()]
    layers.append(Dense(n_classes))
    return Architecture(tuple(input_shape), tuple(layers))


# ---------------------------------------------------------------- parameters


class ParameterSet:
    """Ordered, named collection of arrays.

    The set takes ownership of the arrays it is given and marks them
    read-only, so a ParameterSet can be shared freely between threads.
    """

    __slots__ = ("_names", "_arrays")

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]]):
        names, arrays = [], []
        for name, arr in entries:
            arr = np.asarray(arr)
            if arr.flags.writeable:
                arr.setflags(write=False)
            names.append(str(name))
            arrays.append(arr)
        if len(set(names)) != len(names):
            raise InputError(f"duplicate parameter names in {names}")
        self._names = tuple(names)
        self._arrays = tuple(arrays)

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def arrays(self) -> tuple[np.ndarray, ...]:
        return self._arrays

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(a.shape for a in self._arrays)

    @property
    def dtype(self):
        return self._arrays[0].dtype if self._arrays else DTYPE

    def __len__(self):
        return len(self._names)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(zip(self._names, self._arrays))

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[self._names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def __repr__(self):
        inner = ", ".join(f"{n}{list(a.shape)}" for n, a in self)
        return f"ParameterSet({inner})"

    def num_elements(self) -> int:
        return sum(a.size for a in self._arrays)

    def compatible(self, other: "ParameterSet") -> bool:
        return self._names == other._names and self.shapes == other.shapes

    def check_compatible(self, other: "ParameterSet"):
        if not self.compatible(other):
            raise InputError(f"parameter sets differ: {self!r} vs {other!r}")

    def map(self, fn) -> "ParameterSet":
        return ParameterSet((n, fn(a)) for n, a in self)

    def astype(self, dtype) -> "ParameterSet":
        return self.map(lambda a: a.astype(dtype))

    def equal(self, other: "ParameterSet") -> bool:
        """Bitwise equality (names, shapes, dtypes, values)."""
        return self.compatible(other) and all(
            a.dtype == b.dtype and np.array_equal(a, b) for a, b in zip(self._arrays, other._arrays)
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays]) if self._arrays else np.zeros(0, DTYPE)


# ---------------------------------------------------------------- model


@dataclass(frozen=True)
class Model:
    arch: Architecture
    params: ParameterSet

    def __post_init__(self):
        expected = [(n, s) for n, s, _ in self.arch.param_specs()]
        actual = list(zip(self.params.names, self.params.shapes))
        if expected != actual:
            raise InputError(f"parameters {actual} do not match architecture {expected}")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.arch.input_shape

    @property
    def n_classes(self) -> int:
        return self.arch.n_classes

    def with_params(self, params: ParameterSet) -> "Model":
        return Model(self.arch, params)


@dataclass(frozen=True)
class GradientBundle:
    param_grads: ParameterSet
    input_grad: np.ndarray
    loss: float


def init_params(arch: Architecture, seed: int, dtype=DTYPE) -> ParameterSet:
    """Fan-in scaled uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    entries = []
    for name, shape, fan_in in arch.param_specs():
        if name.endswith(".bias"):
            entries.append((name, np.zeros(shape, dtype)))
        else:
            bound = math.sqrt(6.0 / fan_in)
            entries.append((name, rng.uniform(-bound, bound, size=shape).astype(dtype)))
    return ParameterSet(entries)


def build_model(arch: Architecture, seed: int, dtype=DTYPE) -> Model:
    return Model(arch, init_params(arch, seed, dtype))


# ---------------------------------------------------------------- forward / backward


def _check_batch(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1:] != model.input_shape or x.shape[0] < 1:
        raise InputError(f"batch shape {x.shape} does not match (N, {', '.join(map(str, model.input_shape))})")
    return x.astype(model.params.dtype, copy=False)


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != n:
        raise InputError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise InputError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= k):
        raise InputError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    return y.astype(np.int64, copy=False)


def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    n, hp, wp, c = xp.shape
    ho, wo = hp - k + 1, wp - k + 1
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n, ho, wo, c, k, k
    return win.reshape(n * ho * wo, c * k * k)


# Internally activations are channels-last (N, H, W, C); Flatten and the
# public API use (N, C, H, W) order.


def _forward(model: Model, x: np.ndarray):
    caches = []
    params = model.params
    h = x.transpose(0, 2, 3, 1)
    for i, layer in enumerate(model.arch.layers):
        if isinstance(layer, Conv2d):
            w, b = params[f"conv{i}.weight"], params[f"conv{i}.bias"]
            p, k = layer.padding, layer.kernel
            xp = np.pad(h, ((0, 0), (p, p), (p, p), (0, 0))) if p else h
            n, hp, wp, _ = xp.shape
            ho, wo = hp - k + 1, wp - k + 1
            cols = _im2col(xp, k)
            out = cols @ w.reshape(w.shape[0], -1).T
            out += b
            caches.append((cols, h.shape, xp.shape))
            h = out.reshape(n, ho, wo, -1)
        elif isinstance(layer, MaxPool2d):
            n, hh, ww, c = h.shape
            v = h.reshape(n, hh // 2, 2, ww // 2, 2, c)
            quads = (v[:, :, 0, :, 0], v[:, :, 0, :, 1], v[:, :, 1, :, 0], v[:, :, 1, :, 1])
            out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
            taken = np.zeros(out.shape, dtype=bool)
            masks = []
            for q in quads:  # first maximum wins on ties
                m = (q == out) & ~taken
                taken |= m
                masks.append(m)
            caches.append((masks, h.shape))
            h = out
        elif isinstance(layer, ReLU):
            mask = h > 0
            caches.append(mask)
            h = h * mask
        elif isinstance(layer, Flatten):
            caches.append(h.shape)
            h = h.transpose(0, 3, 1, 2).reshape(h.shape[0], -1) if h.ndim == 4 else h.reshape(h.shape[0], -1)
        elif isinstance(layer, Dense):
            w, b = params[f"dense{i}.weight"], params[f"dense{i}.bias"]
            caches.append(h)
            h = h @ w.T + b
    return h, caches


def _backward(model: Model, caches, dout: np.ndarray, need_input_grad=True):
    grads: dict[str, np.ndarray] = {}
    params = model.params
    g = dout
    for i in range(len(model.arch.layers) - 1, -1, -1):
        layer = model.arch.layers[i]
        cache = caches[i]
        if isinstance(layer, Dense):
            w = params[f"dense{i}.weight"]
            grads[f"dense{i}.weight"] = g.T @ cache
            grads[f"dense{i}.bias"] = g.sum(axis=0)
            if i == 0 and not need_input_grad:
                g = None
                break
            g = g @ w
        elif isinstance(layer, ReLU):
            g = g * cache
        elif isinstance(layer, Flatten):
            shape = cache
            if len(shape) == 4:
                n, hh, ww, c = shape
                g = g.reshape(n, c, hh, ww).transpose(0, 2, 3, 1)
            else:
                g = g.reshape(shape)
        elif isinstance(layer, MaxPool2d):
            masks, in_shape = cache
            n, hh, ww, c = in_shape
            full = np.empty((n, hh // 2, 2, ww // 2, 2, c), dtype=g.dtype)
            full[:, :, 0, :, 0] = g * masks[0]
            full[:, :, 0, :, 1] = g * masks[1]
            full[:, :, 1, :, 0] = g * masks[2]
            full[:, :, 1, :, 1] = g * masks[3]
            g = full.reshape(in_shape)
        elif isinstance(layer, Conv2d):
            cols, in_shape, xp_shape = cache
            w = params[f"conv{i}.weight"]
            n, ho, wo, o = g.shape
            g2 = g.reshape(-1, o)
            grads[f"conv{i}.weight"] = (g2.T @ cols).reshape(w.shape)
            grads[f"conv{i}.bias"] = g2.sum(axis=0)
            if i == 0 and not need_input_grad:
                g = None
                break
            k, p = layer.kernel, layer.padding
            c = in_shape[3]
            dcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros(xp_shape, dtype=g.dtype)
            for a in range(k):
                for bb in range(k):
                    dxp[:, a:a + ho, bb:bb + wo, :] += dcols[..., a, bb]
            g = dxp[:, p:p + in_shape[1], p:p + in_shape[2], :] if p else dxp
    param_grads = ParameterSet((name, grads[name].astype(params[name].dtype, copy=False)) for name in params.names)
    if g is not None:
        g = np.ascontiguousarray(g.transpose(0, 3, 1, 2))
    return param_grads, g


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Logits of shape (N, K)."""
    x = _check_batch(model, batch)
    logits, _ = _forward(model, x)
    return logits


def predict(model: Model, batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest class index."""
    x = _check_batch(model, batch)
    out = [_forward(model, x[s:s + batch_size])[0].argmax(axis=1) for s in range(0, len(x), batch_size)]
    return np.concatenate(out)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def per_sample_cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise InputError(f"logits must be (N, K), got {logits.shape}")
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    return -_log_softmax(logits)[np.arange(len(y)), y]


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean negative log-softmax probability of the true class."""
    return float(per_sample_cross_entropy(logits, labels).mean())


def _ce_grad(logits: np.ndarray, y: np.ndarray, weight: float) -> np.ndarray:
    probs = np.exp(_log_softmax(logits))
    probs[np.arange(len(y)), y] -= 1.0
    return probs * (weight / len(y))


def loss_and_grads(model: Model, batch, labels, weight: float = 1.0, need_input_grad: bool = True):
    """(weight * mean CE, param grads, input grad) in a single forward/backward pass."""
    x = _check_batch(model, batch)
    y = _check_labels(labels, x.shape[0], model.n_classes)
    logits, caches = _forward(model, x)
    loss = float(-_log_softmax(logits)[np.arange(len(y)), y].mean())
    dlogits = _ce_grad(logits, y, weight).astype(logits.dtype, copy=False)
    pgrads, dx = _backward(model, caches, dlogits, need_input_grad)
    return weight * loss, pgrads, dx


def backward(model: Model, batch, labels) -> GradientBundle:
    """Gradients of the mean cross-entropy w.r.t. parameters and inputs."""
    loss, pgrads, dx = loss_and_grads(model, batch, labels)
    return GradientBundle(pgrads, dx, loss)


def input_gradient(model: Model, batch, labels) -> np.ndarray:
    return loss_and_grads(model, batch, labels)[2]


def add_grads(a: ParameterSet, b: ParameterSet) -> ParameterSet:
    a.check_compatible(b)
    return ParameterSet((n, x + y) for (n, x), (_, y) in zip(a, b))


def sgd_step(params: ParameterSet, param_grads: ParameterSet, lr: float) -> ParameterSet:
    """New parameter set ``params - lr * grads``; inputs are left untouched."""
    params.check_compatible(param_grads)
    lr = params.dtype.type(lr)
    return ParameterSet((n, p - lr * g) for (n, p), (_, g) in zip(params, param_grads))


def mixed_adversarial_loss(clean_loss: float, adv_loss: float, mix: float) -> float:
    """``mix * clean + (1 - mix) * adversarial``."""
    if not 0.0 <= mix <= 1.0 or math.isnan(mix):
        raise ConfigError(f"loss mix must lie in [0, 1], got {mix}", key="loss_mix")
    if mix == 1.0:
        return float(clean_loss)
    if mix == 0.0:
        return float(adv_loss)
    return mix * clean_loss + (1.0 - mix) * adv_loss


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"FLATSW1\n"


def save_checkpoint(params: ParameterSet, path) -> None:
    chunks = [CHECKPOINT_MAGIC]
    for name, arr in params:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(path) -> ParameterSet:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise FormatError("bad checkpoint magic", offset=0)
    pos = len(CHECKPOINT_MAGIC)
    entries = []

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated checkpoint: need {n} bytes", offset=pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = math.prod(dims)
        arr = np.frombuffer(take(4 * count), dtype="<f4").astype(DTYPE).reshape(dims)
        entries.append((name, arr))
    return ParameterSet(entries)


def params_from_flat(template: ParameterSet, flat: Sequence[float]) -> ParameterSet:
    """Inverse of :meth:`ParameterSet.flatten` using ``template`` for names and shapes."""
    flat = np.asarray(flat)
    if flat.size != template.num_elements():
        raise InputError(f"expected {template.num_elements()} values, got {flat.size}")
    out, pos = [], 0
    for name, arr in template:
        out.append((name, flat[pos:pos + arr.size].reshape(arr.shape).astype(arr.dtype)))
        pos += arr.size
    return ParameterSet(out)
