"""Small CNN/MLP engine over flat parameter vectors.

Parameters live in a single contiguous vector (:class:`ParamVector`) whose
layout is derived from a :class:`ModelSpec`. Convolutions, pooling and
autodiff are delegated to torch's functional API; everything crossing the
module boundary is a numpy array.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InputError


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int


@dataclass(frozen=True)
class MaxPool:
    window: int


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"


Layer = Union[Conv, MaxPool, Dense, Activation]

_ACTIVATIONS = {"relu": F.relu, "tanh": torch.tanh, "sigmoid": torch.sigmoid}


class LayoutEntry(NamedTuple):
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        out = self.output_shape()
        if out != (self.num_classes,):
            raise ConfigurationError(
                f"network output shape {out} does not match class count {self.num_classes}"
            )

    def output_shape(self) -> tuple:
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ConfigurationError(f"layer {i}: conv expects {layer.in_channels} channels, got shape {shape}")
                if layer.kernel % 2 == 0:
                    raise ConfigurationError(f"layer {i}: 'same' padding needs an odd kernel")
                shape = (layer.out_channels, shape[1], shape[2])
            elif isinstance(layer, MaxPool):
                if len(shape) != 3 or shape[1] < layer.window or shape[2] < layer.window:
                    raise ConfigurationError(f"layer {i}: cannot pool shape {shape} with window {layer.window}")
                shape = (shape[0], shape[1] // layer.window, shape[2] // layer.window)
            elif isinstance(layer, Dense):
                width = int(np.prod(shape))
                if width != layer.in_features:
                    raise ConfigurationError(f"layer {i}: dense expects {layer.in_features} inputs, got {width}")
                shape = (layer.out_features,)
            elif isinstance(layer, Activation):
                if layer.kind not in _ACTIVATIONS:
                    raise ConfigurationError(f"layer {i}: unknown activation {layer.kind!r}")
            else:
                raise ConfigurationError(f"layer {i}: unsupported layer {layer!r}")
        return shape

    @property
    def layout(self) -> tuple:
        entries = []
        offset = 0
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                shapes = [("weight", (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)),
                          ("bias", (layer.out_channels,))]
            elif isinstance(layer, Dense):
                shapes = [("weight", (layer.out_features, layer.in_features)), ("bias", (layer.out_features,))]
            else:
                continue
            for suffix, shape in shapes:
                entry = LayoutEntry(f"{i}.{type(layer).__name__.lower()}.{suffix}", shape, offset)
                entries.append(entry)
                offset += entry.size
        return tuple(entries)

    @property
    def num_params(self) -> int:
        layout = self.layout
        return layout[-1].offset + layout[-1].size if layout else 0


def reference_cnn(num_classes: int = 10) -> ModelSpec:
    """Two-conv classifier for 28x28 grayscale inputs (164,842 parameters)."""
    return ModelSpec(
        layers=(
            Conv(1, 16, 5), Activation("relu"), MaxPool(2),
            Conv(16, 32, 5), Activation("relu"), MaxPool(2),
            Dense(32 * 7 * 7, 96), Activation("relu"),
            Dense(96, num_classes),
        ),
        input_shape=(1, 28, 28),
        num_classes=num_classes,
    )


class ParamVector:
    """Flat parameter vector plus the layout that gives it structure."""

    __slots__ = ("data", "layout")

    def __init__(self, data, layout):
        data = np.asarray(data)
        if data.ndim != 1:
            raise ConfigurationError("ParamVector data must be one-dimensional")
        layout = tuple(layout)
        expected = layout[-1].offset + layout[-1].size if layout else 0
        if data.shape[0] != expected:
            raise ConfigurationError(f"ParamVector has {data.shape[0]} values, layout expects {expected}")
        self.data = data
        self.layout = layout

    @classmethod
    def zeros(cls, layout, dtype=np.float32) -> "ParamVector":
        layout = tuple(layout)
        n = layout[-1].offset + layout[-1].size if layout else 0
        return cls(np.zeros(n, dtype=dtype), layout)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"ParamVector(n={len(self)}, dtype={self.data.dtype}, norm={self.norm():.4g})"

    def check_layout(self, other: "ParamVector"):
        if self.layout != other.layout:
            raise ConfigurationError("ParamVector layouts differ")

    def _binary(self, other, op):
        if isinstance(other, ParamVector):
            self.check_layout(other)
            return ParamVector(op(self.data, other.data), self.layout)
        return ParamVector(op(self.data, other), self.layout)

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, scalar):
        return ParamVector(self.data * scalar, self.layout)

    __rmul__ = __mul__

    def __neg__(self):
        return ParamVector(-self.data, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout)

    def astype(self, dtype) -> "ParamVector":
        return ParamVector(self.data.astype(dtype), self.layout)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data.astype(np.float64)))

    def view(self, name: str) -> np.ndarray:
        for entry in self.layout:
            if entry.name == name:
                return self.data[entry.offset:entry.offset + entry.size].reshape(entry.shape)
        raise KeyError(name)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))


def init_params(spec: ModelSpec, seed: int, dtype=np.float32) -> ParamVector:
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) for weights and biases."""
    rng = np.random.default_rng(seed)
    layout = spec.layout
    data = np.empty(spec.num_params, dtype=np.float64)
    for entry in layout:
        layer = spec.layers[int(entry.name.split(".")[0])]
        fan_in = layer.in_channels * layer.kernel ** 2 if isinstance(layer, Conv) else layer.in_features
        bound = np.sqrt(1.0 / fan_in)
        data[entry.offset:entry.offset + entry.size] = rng.uniform(-bound, bound, entry.size)
    return ParamVector(data.astype(dtype), layout)


@lru_cache(maxsize=32)
def _layer_slices(spec: ModelSpec):
    slices = {}
    for entry in spec.layout:
        idx, _, kind = entry.name.split(".")
        slices.setdefault(int(idx), {})[kind] = (entry.offset, entry.size, entry.shape)
    return slices


def forward_tensor(spec: ModelSpec, flat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Differentiable forward pass on torch tensors (for training loops)."""
    slices = _layer_slices(spec)

    def take(i, kind):
        off, n, shape = slices[i][kind]
        return flat[off:off + n].view(shape)

    h = x
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            h = F.conv2d(h, take(i, "weight"), take(i, "bias"), padding=layer.kernel // 2)
        elif isinstance(layer, MaxPool):
            h = F.max_pool2d(h, layer.window)
        elif isinstance(layer, Dense):
            if h.dim() > 2:
                h = h.flatten(1)
            h = F.linear(h, take(i, "weight"), take(i, "bias"))
        else:
            h = _ACTIVATIONS[layer.kind](h)
    return h


def prepare_batch(spec: ModelSpec, batch) -> np.ndarray:
    """Validate a batch and add the channel axis for single-channel images."""
    batch = np.asarray(batch)
    want = spec.input_shape
    if batch.shape[1:] == want:
        return batch
    if want[0] == 1 and len(want) == 3 and batch.shape[1:] == want[1:]:
        return batch[:, None]
    raise ConfigurationError(f"batch shape {batch.shape} does not match model input {want}")


def _tensors(spec, params, batch):
    dtype = torch.float64 if params.data.dtype == np.float64 else torch.float32
    x = prepare_batch(spec, batch)
    flat = torch.as_tensor(params.data, dtype=dtype)
    x_t = torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)
    return flat, x_t


def _check_labels(labels, num_classes, n):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in 0..{num_classes - 1}")
    return labels.astype(np.int64)


def forward(spec: ModelSpec, params: ParamVector, batch) -> np.ndarray:
    """Raw logits, shape [batch, C]."""
    if len(params) != spec.num_params:
        raise ConfigurationError("parameter count does not match model spec")
    flat, x = _tensors(spec, params, batch)
    with torch.no_grad():
        return forward_tensor(spec, flat, x).numpy()


def cross_entropy(logits, labels) -> float:
    """Mean negative log-softmax of the labelled class."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise InputError("logits must have shape [batch, C]")
    labels = _check_labels(labels, logits.shape[1], logits.shape[0])
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(labels)), labels]
    return float(np.mean(log_z - picked))


def param_gradient(spec: ModelSpec, params: ParamVector, batch, labels) -> ParamVector:
    if len(params) != spec.num_params:
        raise ConfigurationError("parameter count does not match model spec")
    flat, x = _tensors(spec, params, batch)
    y = torch.as_tensor(_check_labels(labels, spec.num_classes, x.shape[0]))
    flat = flat.clone().requires_grad_(True)
    loss = F.cross_entropy(forward_tensor(spec, flat, x), y)
    (grad,) = torch.autograd.grad(loss, flat)
    return ParamVector(grad.numpy().astype(params.data.dtype), params.layout)


def input_gradient(spec: ModelSpec, params: ParamVector, batch, targets) -> np.ndarray:
    """Gradient of the mean cross-entropy toward ``targets`` w.r.t. the input pixels."""
    if len(params) != spec.num_params:
        raise ConfigurationError("parameter count does not match model spec")
    batch = np.asarray(batch)
    flat, x = _tensors(spec, params, batch)
    y = torch.as_tensor(_check_labels(targets, spec.num_classes, x.shape[0]))
    x = x.clone().requires_grad_(True)
    loss = F.cross_entropy(forward_tensor(spec, flat, x), y)
    (grad,) = torch.autograd.grad(loss, x)
    return grad.numpy().reshape(batch.shape)


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    params.check_layout(grad)
    if lr < 0:
        raise ConfigurationError("learning rate must be non-negative")
    return ParamVector(params.data - lr * grad.data.astype(params.data.dtype), params.layout)


def predict(spec: ModelSpec, params: ParamVector, images, batch_size: int = 2000) -> np.ndarray:
    """Argmax class predictions, computed in chunks."""
    images = np.asarray(images)
    out = []
    for start in range(0, len(images), batch_size):
        out.append(forward(spec, params, images[start:start + batch_size]).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
