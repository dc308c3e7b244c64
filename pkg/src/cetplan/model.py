"""Desk-scale differentiable models evaluated in float64.

Layers are indexed input-to-output: ``layer_0`` consumes the sample, the last
layer produces logits (or regression outputs).  A network written as a nested
composition ``h_1(h_2(...h_n(x)))`` therefore maps ``h_n`` to ``layer_0`` and
``h_1`` to ``layer_{n-1}``.

Every layer owns one contiguous segment of the flat parameter vector holding
its weight tensor followed by its bias.  Loss, gradient and Hessian-vector
products are exact (reverse-mode autodiff, applied twice for the HVP) and are
averaged over the batch.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericalError

LAYER_KINDS = ("dense", "conv2d")
ACTIVATIONS = ("none", "relu", "tanh")
LOSS_KINDS = ("cross_entropy", "mse")
SPLITS = ("train", "calibration", "eval")

torch.set_default_dtype(torch.float64)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    activation: str = "none"
    kernel_size: int = 0
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(int(s) for s in self.in_shape))
        object.__setattr__(self, "out_shape", tuple(int(s) for s in self.out_shape))
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.kind == "dense":
            if len(self.out_shape) != 1:
                raise ConfigurationError("dense output must be a vector")
        else:
            if len(self.in_shape) != 3 or len(self.out_shape) != 3:
                raise ConfigurationError("conv2d shapes must be (channels, height, width)")
            k = self.kernel_size
            if k < 1:
                raise ConfigurationError("conv2d needs kernel_size >= 1")
            _, h, w = self.in_shape
            if self.out_shape[1:] != (h - k + 1, w - k + 1):
                raise ConfigurationError(
                    f"conv2d {self.in_shape} with kernel {k} cannot produce {self.out_shape}"
                )

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.out_shape[0], math.prod(self.in_shape))
        return (self.out_shape[0], self.in_shape[0], self.kernel_size, self.kernel_size)

    @property
    def num_params(self) -> int:
        return math.prod(self.weight_shape) + (self.out_shape[0] if self.bias else 0)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "in_shape": list(self.in_shape),
            "out_shape": list(self.out_shape),
            "activation": self.activation,
            "kernel_size": self.kernel_size,
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        return cls(
            kind=d["kind"],
            in_shape=tuple(d["in_shape"]),
            out_shape=tuple(d["out_shape"]),
            activation=d.get("activation", "none"),
            kernel_size=d.get("kernel_size", 0),
            bias=d.get("bias", True),
        )


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    loss: str = "cross_entropy"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ConfigurationError("a model needs at least one layer")
        if self.loss not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss kind {self.loss!r}")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if b.kind == "dense":
                ok = math.prod(a.out_shape) == math.prod(b.in_shape)
            else:
                ok = a.out_shape == b.in_shape
            if not ok:
                raise ConfigurationError(
                    f"layer_{i} output {a.out_shape} does not feed layer_{i + 1} input {b.in_shape}"
                )

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.layers[0].in_shape

    @property
    def output_dim(self) -> int:
        return math.prod(self.layers[-1].out_shape)

    @property
    def layer_ids(self) -> list[str]:
        return [f"layer_{i}" for i in range(len(self.layers))]

    @property
    def num_params(self) -> int:
        return sum(layer.num_params for layer in self.layers)

    def segment_map(self) -> dict[str, tuple[int, int]]:
        out, offset = {}, 0
        for lid, layer in zip(self.layer_ids, self.layers):
            out[lid] = (offset, layer.num_params)
            offset += layer.num_params
        return out

    def to_dict(self) -> dict:
        return {"layers": [l.to_dict() for l in self.layers], "loss": self.loss}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(tuple(LayerSpec.from_dict(l) for l in d["layers"]), d.get("loss", "cross_entropy"))


def mlp(sizes: Sequence[int], activation: str = "tanh", loss: str = "cross_entropy") -> ModelSpec:
    """Dense feedforward net; ``sizes`` lists widths from input to output."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        last = i == len(sizes) - 2
        layers.append(LayerSpec("dense", (a,), (b,), "none" if last else activation))
    return ModelSpec(tuple(layers), loss)


class ParameterVector:
    """Flat float64 vector with a per-layer segment map.

    The underlying array is read-only; arithmetic returns new vectors.
    """

    __slots__ = ("_values", "_segments")

    def __init__(self, values, segments: Mapping[str, tuple[int, int]]):
        arr = np.array(values, dtype=np.float64).reshape(-1)
        arr.setflags(write=False)
        segs = {str(k): (int(o), int(n)) for k, (o, n) in segments.items()}
        offset = 0
        for lid, (o, n) in segs.items():
            if o != offset or n < 0:
                raise ConfigurationError(f"segment {lid} is not contiguous at offset {offset}")
            offset += n
        if offset != arr.size:
            raise ConfigurationError(
                f"segments cover {offset} entries but the vector has {arr.size}"
            )
        self._values = arr
        self._segments = segs

    @classmethod
    def zeros(cls, segments: Mapping[str, tuple[int, int]]) -> "ParameterVector":
        n = sum(length for _, length in segments.values())
        return cls(np.zeros(n), segments)

    @classmethod
    def for_spec(cls, spec: ModelSpec, values) -> "ParameterVector":
        return cls(values, spec.segment_map())

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def segments(self) -> dict[str, tuple[int, int]]:
        return dict(self._segments)

    @property
    def layer_ids(self) -> list[str]:
        return list(self._segments)

    def __len__(self) -> int:
        return self._values.size

    def __iter__(self) -> Iterator[float]:
        return iter(self._values)

    def segment(self, layer_id: str) -> np.ndarray:
        o, n = self._segments[layer_id]
        return self._values[o:o + n]

    def like(self, values) -> "ParameterVector":
        return ParameterVector(values, self._segments)

    def aligned_with(self, other: "ParameterVector") -> bool:
        return self._segments == other._segments

    def _check(self, other):
        if isinstance(other, ParameterVector):
            if not self.aligned_with(other):
                raise ConfigurationError("parameter vectors have different segment maps")
            return other._values
        return other

    def __add__(self, other):
        return self.like(self._values + self._check(other))

    def __sub__(self, other):
        return self.like(self._values - self._check(other))

    def __mul__(self, scalar):
        return self.like(self._values * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self.like(-self._values)

    def dot(self, other) -> float:
        return float(self._values @ self._check(other))

    def norm(self) -> float:
        return float(np.linalg.norm(self._values))

    def layer_rms(self) -> dict[str, float]:
        return {
            lid: float(np.sqrt(np.mean(self.segment(lid) ** 2))) if n else 0.0
            for lid, (_, n) in self._segments.items()
        }

    def checksum(self) -> str:
        return hashlib.sha256(self._values.tobytes()).hexdigest()[:16]

    def __eq__(self, other):
        return (
            isinstance(other, ParameterVector)
            and self._segments == other._segments
            and np.array_equal(self._values, other._values)
        )

    def __repr__(self):
        return f"ParameterVector(n={self._values.size}, layers={len(self._segments)})"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Inputs with integer labels; ``targets`` (float) is set for regression data."""

    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 2
    targets: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int32).reshape(-1)
        if x.ndim < 2:
            raise ConfigurationError("inputs must be (samples, *shape)")
        if x.shape[0] != y.shape[0]:
            raise ConfigurationError("inputs and labels disagree on sample count")
        if self.split not in SPLITS:
            raise ConfigurationError(f"unknown split {self.split!r}")
        if self.split == "calibration" and x.shape[0] == 0:
            raise ConfigurationError("calibration split must be non-empty")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ConfigurationError("labels outside [0, num_classes)")
        t = self.targets
        if t is not None:
            t = np.ascontiguousarray(t, dtype=np.float64)
            if t.ndim == 1:
                t = t[:, None]
            if t.shape[0] != x.shape[0]:
                raise ConfigurationError("targets and inputs disagree on sample count")
            t.setflags(write=False)
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "targets", t)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(
            self.inputs[idx],
            self.labels[idx],
            split or self.split,
            self.num_classes,
            None if self.targets is None else self.targets[idx],
            dict(self.meta),
        )

    def with_split(self, split: str) -> "Dataset":
        return Dataset(self.inputs, self.labels, split, self.num_classes, self.targets, dict(self.meta))

    def checksum(self) -> str:
        h = hashlib.sha256(self.inputs.tobytes())
        h.update(self.labels.tobytes())
        if self.targets is not None:
            h.update(self.targets.tobytes())
        return h.hexdigest()[:16]


def init_params(spec: ModelSpec, seed: int = 0) -> ParameterVector:
    """Glorot-uniform weights, small uniform biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for layer in spec.layers:
        wshape = layer.weight_shape
        fan_out = wshape[0] * math.prod(wshape[2:])
        fan_in = math.prod(wshape[1:])
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=math.prod(wshape)))
        if layer.bias:
            chunks.append(rng.uniform(-0.1, 0.1, size=layer.out_shape[0]))
    return ParameterVector.for_spec(spec, np.concatenate(chunks))


def _activate(h, kind):
    if kind == "relu":
        return torch.relu(h)
    if kind == "tanh":
        return torch.tanh(h)
    return h


def forward(spec: ModelSpec, w: torch.Tensor, x: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Network outputs for a batch ``x``; ``w`` is the flat parameter tensor."""
    h = x
    offset = 0
    for i, layer in enumerate(spec.layers):
        nw = math.prod(layer.weight_shape)
        weight = w[offset:offset + nw].view(layer.weight_shape)
        offset += nw
        bias = None
        if layer.bias:
            bias = w[offset:offset + layer.out_shape[0]]
            offset += layer.out_shape[0]
        if layer.kind == "dense":
            h = h.reshape(h.shape[0], -1)
            h = F.linear(h, weight, bias)
        else:
            h = F.conv2d(h, weight, bias)
        h = _activate(h, layer.activation)
        if check and not bool(torch.isfinite(h).all()):
            raise NumericalError(f"non-finite activation in layer_{i}", layer=i)
    return h


def _targets(spec: ModelSpec, batch: Dataset, out_dim: int) -> torch.Tensor:
    if spec.loss == "cross_entropy":
        return torch.tensor(batch.labels, dtype=torch.long)
    if batch.targets is not None:
        return torch.tensor(batch.targets)
    return F.one_hot(torch.tensor(batch.labels, dtype=torch.long), out_dim).to(torch.float64)


def sample_losses(spec: ModelSpec, w: torch.Tensor, x: torch.Tensor, t: torch.Tensor, check=True):
    out = forward(spec, w, x, check=check)
    if spec.loss == "cross_entropy":
        return F.cross_entropy(out, t, reduction="none")
    return ((out - t) ** 2).mean(dim=1)


class Objective:
    """Batch-averaged loss of ``spec`` over ``batch`` as a function of the flat weights.

    Holds the batch as tensors so repeated gradient / HVP calls (Lanczos, the
    Taylor probes) do not re-convert data.
    """

    def __init__(self, spec: ModelSpec, batch: Dataset):
        if len(batch) == 0:
            raise ConfigurationError("batch is empty")
        if tuple(batch.sample_shape) != spec.input_shape:
            raise ConfigurationError(
                f"batch samples have shape {batch.sample_shape}, model expects {spec.input_shape}"
            )
        if spec.loss == "mse" and batch.targets is not None and batch.targets.shape[1] != spec.output_dim:
            raise ConfigurationError("regression targets do not match the model output width")
        if spec.loss == "cross_entropy" and batch.num_classes > spec.output_dim:
            raise ConfigurationError("model has fewer outputs than the dataset has classes")
        self.spec = spec
        self.batch = batch
        self._x = torch.tensor(batch.inputs)
        self._t = _targets(spec, batch, spec.output_dim)
        self.dim = spec.num_params
        self.segments = spec.segment_map()

    def _w(self, params, grad=False) -> torch.Tensor:
        vals = params.values if isinstance(params, ParameterVector) else np.asarray(params, np.float64)
        if vals.size != self.dim:
            raise ConfigurationError(f"expected {self.dim} parameters, got {vals.size}")
        w = torch.tensor(vals, dtype=torch.float64)
        return w.requires_grad_(grad)

    def _finite(self, t: torch.Tensor, what: str) -> torch.Tensor:
        if not bool(torch.isfinite(t).all()):
            raise NumericalError(f"non-finite {what}")
        return t

    def _mean_loss(self, w):
        return sample_losses(self.spec, w, self._x, self._t).mean()

    def loss(self, params) -> float:
        with torch.no_grad():
            return float(self._finite(self._mean_loss(self._w(params)), "loss"))

    def sample_losses(self, params) -> np.ndarray:
        with torch.no_grad():
            return sample_losses(self.spec, self._w(params), self._x, self._t).numpy()

    def gradient_array(self, params) -> np.ndarray:
        w = self._w(params, grad=True)
        (g,) = torch.autograd.grad(self._mean_loss(w), w)
        return self._finite(g, "gradient").numpy()

    def loss_and_gradient(self, params) -> tuple[float, np.ndarray]:
        w = self._w(params, grad=True)
        f = self._mean_loss(w)
        (g,) = torch.autograd.grad(f, w)
        return float(self._finite(f.detach(), "loss")), self._finite(g, "gradient").numpy()

    def gradient(self, params) -> ParameterVector:
        return ParameterVector(self.gradient_array(params), self.segments)

    def hvp_array(self, params, v) -> np.ndarray:
        w = self._w(params, grad=True)
        vv = torch.tensor(v.values if isinstance(v, ParameterVector) else np.asarray(v, np.float64))
        if vv.numel() != self.dim:
            raise ConfigurationError("direction length does not match the parameter count")
        (g,) = torch.autograd.grad(self._mean_loss(w), w, create_graph=True)
        (hv,) = torch.autograd.grad(g @ vv, w)
        return self._finite(hv, "Hessian-vector product").numpy()

    def hvp(self, params, v) -> ParameterVector:
        return ParameterVector(self.hvp_array(params, v), self.segments)

    def hvp_operator(self, params) -> Callable[[np.ndarray], np.ndarray]:
        """Linear operator ``v -> H v`` at fixed ``params`` on raw arrays."""
        w0 = self._w(params, grad=True)
        (g,) = torch.autograd.grad(self._mean_loss(w0), w0, create_graph=True)

        def apply(v: np.ndarray) -> np.ndarray:
            vv = torch.as_tensor(np.asarray(v, dtype=np.float64))
            (hv,) = torch.autograd.grad(g @ vv, w0, retain_graph=True)
            return self._finite(hv, "Hessian-vector product").numpy().copy()

        return apply


def _check_params(spec: ModelSpec, params: ParameterVector):
    if len(params) != spec.num_params:
        raise ConfigurationError(
            f"model has {spec.num_params} parameters but the vector has {len(params)}"
        )


def loss(spec: ModelSpec, params: ParameterVector, batch: Dataset) -> float:
    _check_params(spec, params)
    return Objective(spec, batch).loss(params)


def gradient(spec: ModelSpec, params: ParameterVector, batch: Dataset) -> ParameterVector:
    _check_params(spec, params)
    return params.like(Objective(spec, batch).gradient_array(params))


def hvp(spec: ModelSpec, params: ParameterVector, batch: Dataset, v: ParameterVector) -> ParameterVector:
    _check_params(spec, params)
    if not params.aligned_with(v):
        raise ConfigurationError("direction does not share the parameter segment map")
    return params.like(Objective(spec, batch).hvp_array(params, v))


def perturbed_loss(spec: ModelSpec, params: ParameterVector, delta: ParameterVector, batch: Dataset) -> float:
    _check_params(spec, params)
    return loss(spec, params + delta, batch)


def predict(spec: ModelSpec, params: ParameterVector, inputs: np.ndarray) -> np.ndarray:
    _check_params(spec, params)
    with torch.no_grad():
        w = torch.tensor(params.values)
        return forward(spec, w, torch.tensor(np.asarray(inputs, np.float64))).numpy()


def accuracy(spec: ModelSpec, params: ParameterVector, batch: Dataset) -> float:
    """Top-1 accuracy for classifiers; for regression returns the eval MSE instead."""
    out = predict(spec, params, batch.inputs)
    if spec.loss == "mse" and batch.targets is not None:
        return float(np.mean((out - batch.targets) ** 2))
    return float(np.mean(np.argmax(out, axis=1) == batch.labels))
