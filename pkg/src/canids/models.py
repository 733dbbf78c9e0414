"""Deterministic and weight-uncertain CNN classifiers over feature windows.

Both modes share one layer pipeline and differ only in where the weights
come from: plain tensors, or reparameterized draws from the mean-field
posterior. With the noise pinned to zero the weight-uncertain forward pass
reduces exactly to the deterministic one at the posterior means.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor
from .features import BITS_PER_FRAME
from .frames import ClassLabel
from .variational import GaussianVariationalParam, PriorSpec, WeightSample, sample_weights

NUM_CLASSES = len(ClassLabel)


class Mode(Enum):
    DETERMINISTIC = "deterministic"
    BAYESIAN = "bayesian"


class ModeMismatch(ValueError):
    """Operation requires the other model mode."""


@dataclass(frozen=True)
class ConvSpec:
    filters: int = 8
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class ReluSpec:
    pass


@dataclass(frozen=True)
class MaxPoolSpec:
    size: int = 2


@dataclass(frozen=True)
class FlattenSpec:
    pass


@dataclass(frozen=True)
class DenseSpec:
    units: int = 64


@dataclass(frozen=True)
class LogSoftmaxSpec:
    pass


LayerSpec = Union[ConvSpec, ReluSpec, MaxPoolSpec, FlattenSpec, DenseSpec, LogSoftmaxSpec]

_LAYER_TAGS = {
    ConvSpec: "conv",
    ReluSpec: "relu",
    MaxPoolSpec: "max_pool",
    FlattenSpec: "flatten",
    DenseSpec: "dense",
    LogSoftmaxSpec: "log_softmax",
}


def default_layers(dense_units: int = 64) -> tuple[LayerSpec, ...]:
    return (
        ConvSpec(filters=8, kernel=3, stride=1, padding=1),
        ReluSpec(),
        MaxPoolSpec(size=2),
        FlattenSpec(),
        DenseSpec(units=dense_units),
        ReluSpec(),
        DenseSpec(units=NUM_CLASSES),
        LogSoftmaxSpec(),
    )


@dataclass(frozen=True)
class ModelSpec:
    """Architecture plus mode. The layer chain must end in a
    NUM_CLASSES-wide log-softmax head."""

    input_shape: tuple[int, int, int] = (1, 16, BITS_PER_FRAME)
    layers: tuple[LayerSpec, ...] = field(default_factory=default_layers)
    mode: Mode = Mode.DETERMINISTIC

    def __post_init__(self):
        shapes = infer_shapes(self)  # raises on an inconsistent chain
        final = shapes[-1]
        if final != (NUM_CLASSES,):
            raise ShapeMismatch(
                f"model must end with {NUM_CLASSES} outputs, got {final}"
            )
        if not isinstance(self.layers[-1], LogSoftmaxSpec):
            raise ShapeMismatch("model must end with a log_softmax layer")

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            entry = {"type": _LAYER_TAGS[type(layer)]}
            entry.update(vars(layer))
            layers.append(entry)
        return {"input_shape": list(self.input_shape), "layers": layers, "mode": self.mode.value}

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        by_tag = {tag: cls for cls, tag in _LAYER_TAGS.items()}
        layers = []
        for entry in d["layers"]:
            kwargs = {k: v for k, v in entry.items() if k != "type"}
            layers.append(by_tag[entry["type"]](**kwargs))
        return ModelSpec(tuple(d["input_shape"]), tuple(layers), Mode(d["mode"]))


def infer_shapes(spec: "ModelSpec") -> list[tuple[int, ...]]:
    """Per-layer output shapes (without the batch axis)."""
    shape: tuple[int, ...] = tuple(spec.input_shape)
    shapes = [shape]
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            c, h, w = shape
            h2 = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            w2 = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if h2 < 1 or w2 < 1:
                raise ShapeMismatch(f"conv collapses {shape} to {(layer.filters, h2, w2)}")
            shape = (layer.filters, h2, w2)
        elif isinstance(layer, MaxPoolSpec):
            c, h, w = shape
            h2 = (h - layer.size) // layer.size + 1
            w2 = (w - layer.size) // layer.size + 1
            if h2 < 1 or w2 < 1:
                raise ShapeMismatch(f"max_pool collapses {shape}")
            shape = (c, h2, w2)
        elif isinstance(layer, FlattenSpec):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, DenseSpec):
            if len(shape) != 1:
                raise ShapeMismatch(f"dense layer needs flat input, got {shape}")
            shape = (layer.units,)
        elif isinstance(layer, (ReluSpec, LogSoftmaxSpec)):
            pass
        else:
            raise ShapeMismatch(f"unknown layer {layer!r}")
        shapes.append(shape)
    return shapes


def _param_shapes(spec: ModelSpec) -> list[tuple[str, int, tuple[int, ...]]]:
    """(name, layer index, shape) for every weight tensor, in layer order.
    Conv biases are stored (F, 1, 1) so they broadcast over the feature map."""
    out = []
    shape: tuple[int, ...] = tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ConvSpec):
            out.append(("w", i, (layer.filters, shape[0], layer.kernel, layer.kernel)))
            out.append(("b", i, (layer.filters, 1, 1)))
        elif isinstance(layer, DenseSpec):
            out.append(("w", i, (shape[0], layer.units)))
            out.append(("b", i, (layer.units,)))
        shape = infer_shapes(spec)[i + 1]
    return out


@dataclass
class ModelState:
    """Weights for one model: plain tensors (deterministic) or
    GaussianVariationalParam pairs (bayesian), in _param_shapes order."""

    spec: ModelSpec
    params: list[Tensor | GaussianVariationalParam]
    epoch: int = 0

    def trainable_tensors(self) -> list[Tensor]:
        if self.spec.mode is Mode.DETERMINISTIC:
            return list(self.params)
        out = []
        for p in self.params:
            out.extend((p.mu, p.rho))
        return out

    def variational_params(self) -> list[GaussianVariationalParam]:
        if self.spec.mode is not Mode.BAYESIAN:
            raise ModeMismatch("deterministic model has no variational parameters")
        return list(self.params)


def init_model(spec: ModelSpec, seed: int = 0) -> ModelState:
    """Initialize weights: U(-0.1, 0.1) for plain weights and posterior
    means, rho = -3 for posterior scales."""
    rng = np.random.default_rng(seed)
    params: list[Tensor | GaussianVariationalParam] = []
    for _name, _idx, shape in _param_shapes(spec):
        if spec.mode is Mode.DETERMINISTIC:
            params.append(ad.parameter(rng.uniform(-0.1, 0.1, size=shape)))
        else:
            params.append(GaussianVariationalParam.init(shape, rng))
    return ModelState(spec=spec, params=params)


def draw_sample(
    state: ModelState,
    prior: PriorSpec,
    rng: np.random.Generator | None = None,
    eps: Sequence[np.ndarray] | None = None,
) -> list[WeightSample]:
    """One reparameterized draw per weight tensor, in parameter order."""
    thetas = state.variational_params()
    if eps is None:
        return [sample_weights(t, prior, rng=rng) for t in thetas]
    return [sample_weights(t, prior, eps=e) for t, e in zip(thetas, eps)]


def forward(
    state: ModelState,
    x: np.ndarray,
    sample: Sequence[WeightSample] | None = None,
    prior: PriorSpec | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Log-probabilities (n, NUM_CLASSES) for a batch shaped (n, C, H, W).

    Deterministic mode uses the stored weights (passing a sample is an
    error). Bayesian mode consumes one WeightSample per weight tensor and
    draws a fresh one via (prior, rng) when none is given.
    """
    if state.spec.mode is Mode.DETERMINISTIC:
        if sample is not None:
            raise ModeMismatch("deterministic forward does not take weight samples")
        weights = list(state.params)
    else:
        if sample is None:
            if rng is None:
                raise ValueError("bayesian forward needs a weight sample or an rng")
            sample = draw_sample(state, prior or PriorSpec(), rng=rng)
        weights = [s.w for s in sample]

    return run_layers(state.spec, weights, x)


def run_layers(spec: ModelSpec, weights: Sequence[Tensor], x: np.ndarray) -> Tensor:
    """Apply the layer chain to a batch given resolved weight tensors."""
    x = np.asarray(x, dtype=np.float64)
    expected = tuple(spec.input_shape)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeMismatch(f"batch shape {x.shape} does not match input {expected}")

    out = Tensor(x)
    w_iter = iter(weights)
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            out = ad.conv2d(out, next(w_iter), stride=layer.stride, padding=layer.padding)
            out = out + next(w_iter)
        elif isinstance(layer, DenseSpec):
            out = ad.matmul(out, next(w_iter))
            out = out + next(w_iter)
        elif isinstance(layer, ReluSpec):
            out = ad.relu(out)
        elif isinstance(layer, MaxPoolSpec):
            out = ad.max_pool2d(out, size=layer.size)
        elif isinstance(layer, FlattenSpec):
            out = ad.flatten(out)
        elif isinstance(layer, LogSoftmaxSpec):
            out = ad.log_softmax(out)
    return out


def sample_weight_values(state: ModelState, rng: np.random.Generator) -> list[Tensor]:
    """One graph-free reparameterized draw per weight tensor, for inference
    paths that never differentiate (same distribution as draw_sample)."""
    from .variational import softplus_values

    out = []
    for theta in state.variational_params():
        eps = rng.standard_normal(theta.shape)
        out.append(Tensor(theta.mu.data + softplus_values(theta.rho.data) * eps))
    return out


def predict_classes(log_probs: Tensor | np.ndarray) -> np.ndarray:
    """Argmax per row; ties resolve to the lower class index."""
    data = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return data.argmax(axis=-1)
