# edgebench/nn_engine.py
"""
Layer vocabulary, float models, execution plans and forward inference.

Two backends run every layer kind:

* reference   - direct kernels, one output position / unit at a time
* accelerated - im2col + GEMM for Conv2D, GEMM for Dense

A plan assigns each layer a backend. Layers whose kind is not in the
accelerated set fall back to the reference kernels, the same way an
inference delegate hands unsupported operators back to the CPU path.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor_core import Tensor, _pair, conv_output_size, gemm, im2col_array

logger = logging.getLogger(__name__)


class LayerKind(Enum):
    CONV2D = "Conv2D"
    MAXPOOL2D = "MaxPool2D"
    FLATTEN = "Flatten"
    DENSE = "Dense"
    RELU = "ReLU"
    SOFTMAX = "Softmax"

    @property
    def has_params(self) -> bool:
        return self in (LayerKind.CONV2D, LayerKind.DENSE)


class Backend(Enum):
    REFERENCE = "reference"
    ACCELERATED = "accelerated"


DEFAULT_ACCELERATED_KINDS: FrozenSet[LayerKind] = frozenset({LayerKind.CONV2D, LayerKind.DENSE})


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    out_channels: int = 0
    kernel: Tuple[int, int] = (0, 0)
    stride: int = 1
    padding: int = 0
    pool: int = 0
    units: int = 0

    def __post_init__(self):
        if self.kind is LayerKind.CONV2D:
            if self.out_channels < 1 or min(self.kernel) < 1 or self.stride < 1 or self.padding < 0:
                raise ShapeError(f"Invalid Conv2D attributes: {self}")
        elif self.kind is LayerKind.MAXPOOL2D:
            if self.pool < 1 or self.stride < 1:
                raise ShapeError(f"Invalid MaxPool2D attributes: {self}")
        elif self.kind is LayerKind.DENSE:
            if self.units < 1:
                raise ShapeError(f"Dense needs at least one unit, got {self.units}")

    @classmethod
    def conv2d(cls, out_channels: int, kernel=3, stride: int = 1, padding: int = 0) -> "LayerSpec":
        return cls(LayerKind.CONV2D, out_channels=out_channels, kernel=_pair(kernel),
                   stride=stride, padding=padding)

    @classmethod
    def maxpool2d(cls, pool: int = 2, stride: Optional[int] = None) -> "LayerSpec":
        return cls(LayerKind.MAXPOOL2D, pool=pool, stride=pool if stride is None else stride)

    @classmethod
    def flatten(cls) -> "LayerSpec":
        return cls(LayerKind.FLATTEN)

    @classmethod
    def dense(cls, units: int) -> "LayerSpec":
        return cls(LayerKind.DENSE, units=units)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(LayerKind.RELU)

    @classmethod
    def softmax(cls) -> "LayerSpec":
        return cls(LayerKind.SOFTMAX)

    def __str__(self) -> str:
        if self.kind is LayerKind.CONV2D:
            kh, kw = self.kernel
            return f"Conv2D({self.out_channels}, {kh}x{kw}, s{self.stride}, p{self.padding})"
        if self.kind is LayerKind.MAXPOOL2D:
            return f"MaxPool2D({self.pool}, s{self.stride})"
        if self.kind is LayerKind.DENSE:
            return f"Dense({self.units})"
        return self.kind.value


@dataclass(frozen=True)
class LayerParams:
    weights: Tensor
    bias: Tensor


@dataclass(frozen=True)
class ModelMetadata:
    name: str = "model"
    seed: int = 0
    epochs: int = 0
    sparsity: float = 0.0


@dataclass(frozen=True)
class Model:
    layers: Tuple[LayerSpec, ...]
    params: Tuple[Optional[LayerParams], ...]
    input_shape: Tuple[int, ...]
    class_names: Tuple[str, ...]
    metadata: ModelMetadata = field(default_factory=ModelMetadata)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "params", tuple(self.params))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))
        if len(self.params) != len(self.layers):
            raise ShapeError(
                f"Model has {len(self.layers)} layers but {len(self.params)} parameter slots"
            )

    def weight_layers(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind.has_params]

    def parameter_count(self) -> int:
        return sum(p.weights.size + p.bias.size for p in self.params if p is not None)

    def with_params(self, params: Sequence[Optional[LayerParams]], **metadata) -> "Model":
        meta = replace(self.metadata, **metadata) if metadata else self.metadata
        return replace(self, params=tuple(params), metadata=meta)

    def validate(self) -> List[Tuple[int, ...]]:
        return infer_shapes(self)

    def infer(self, input: Tensor, plan: Optional["ExecutionPlan"] = None) -> Tensor:
        return forward(self, input, plan)


@dataclass(frozen=True)
class ExecutionPlan:
    backends: Tuple[Backend, ...]

    def __post_init__(self):
        object.__setattr__(self, "backends", tuple(Backend(b) for b in self.backends))

    @classmethod
    def uniform(cls, layer_count: int, backend: Backend) -> "ExecutionPlan":
        return cls((backend,) * layer_count)

    def __len__(self) -> int:
        return len(self.backends)

    def __iter__(self):
        return iter(self.backends)

    def __getitem__(self, index: int) -> Backend:
        return self.backends[index]

    def describe(self, model: Model) -> str:
        tags = {Backend.ACCELERATED: "acc", Backend.REFERENCE: "ref"}
        return " ".join(f"{layer.kind.value}:{tags[b]}" for layer, b in zip(model.layers, self.backends))


# ---------------------------------------------------------------------------
# shapes


def _layer_output_shape(index: int, layer: LayerSpec, shape: Tuple[int, ...],
                        params: Optional[LayerParams]) -> Tuple[int, ...]:
    kind = layer.kind
    where = f"layer {index} ({layer})"

    if kind.has_params and params is None:
        raise ShapeError(f"{where} has no parameters")
    if not kind.has_params and params is not None:
        raise ShapeError(f"{where} takes no parameters")

    if kind is LayerKind.CONV2D:
        if len(shape) != 3:
            raise ShapeError(f"{where} needs an (h, w, c) input, got {list(shape)}")
        h, w, c = shape
        kh, kw = layer.kernel
        oh = conv_output_size(h, kh, layer.stride, layer.padding)
        ow = conv_output_size(w, kw, layer.stride, layer.padding)
        if oh < 1 or ow < 1 or kh > h + 2 * layer.padding or kw > w + 2 * layer.padding:
            raise ShapeError(f"{where} kernel does not fit input {list(shape)}")
        expected_w = (kh, kw, c, layer.out_channels)
        if params.weights.shape != expected_w or params.bias.shape != (layer.out_channels,):
            raise ShapeError(
                f"{where} expects weights {list(expected_w)} and bias [{layer.out_channels}], "
                f"got {list(params.weights.shape)} and {list(params.bias.shape)}"
            )
        return oh, ow, layer.out_channels

    if kind is LayerKind.MAXPOOL2D:
        if len(shape) != 3:
            raise ShapeError(f"{where} needs an (h, w, c) input, got {list(shape)}")
        h, w, c = shape
        oh = (h - layer.pool) // layer.stride + 1
        ow = (w - layer.pool) // layer.stride + 1
        if layer.pool > h or layer.pool > w:
            raise ShapeError(f"{where} pool does not fit input {list(shape)}")
        return oh, ow, c

    if kind is LayerKind.FLATTEN:
        return (math.prod(shape),)

    if kind is LayerKind.DENSE:
        if len(shape) != 1:
            raise ShapeError(f"{where} needs a flat input, got {list(shape)}")
        expected_w = (shape[0], layer.units)
        if params.weights.shape != expected_w or params.bias.shape != (layer.units,):
            raise ShapeError(
                f"{where} expects weights {list(expected_w)} and bias [{layer.units}], "
                f"got {list(params.weights.shape)} and {list(params.bias.shape)}"
            )
        return (layer.units,)

    if kind is LayerKind.SOFTMAX and len(shape) != 1:
        raise ShapeError(f"{where} needs a flat input, got {list(shape)}")
    return shape


def infer_shapes(model: Model) -> List[Tuple[int, ...]]:
    """Propagate ``model.input_shape`` through every layer; returns each layer's output shape."""
    if not model.layers:
        raise ShapeError("A model must have at least one layer")

    shapes = []
    shape = model.input_shape
    last = len(model.layers) - 1
    for index, (layer, params) in enumerate(zip(model.layers, model.params)):
        if layer.kind is LayerKind.SOFTMAX and index != last:
            raise ShapeError(f"layer {index}: Softmax may only be the final layer")
        shape = _layer_output_shape(index, layer, shape, params)
        shapes.append(shape)

    if len(shape) != 1 or shape[0] != len(model.class_names):
        raise ShapeError(
            f"Final output shape {list(shape)} does not match {len(model.class_names)} class names"
        )
    return shapes


# ---------------------------------------------------------------------------
# kernels


def _direct_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int) -> np.ndarray:
    kh, kw, in_c, out_c = w.shape
    if padding:
        x = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    oh = (x.shape[0] - kh) // stride + 1
    ow = (x.shape[1] - kw) // stride + 1

    # one multiply-accumulate per kernel tap and input channel, all filters at once
    out = np.empty((oh, ow, out_c), dtype=np.float32)
    for oy in range(oh):
        top = oy * stride
        for ox in range(ow):
            left = ox * stride
            acc = b.astype(np.float64)
            for ky in range(kh):
                for kx in range(kw):
                    pixel = x[top + ky, left + kx]
                    for c in range(in_c):
                        acc = acc + float(pixel[c]) * w[ky, kx, c]
            out[oy, ox] = acc
    return out


def _conv_arrays(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int,
                 backend: Backend) -> np.ndarray:
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"Conv2D needs (h, w, c) input and 4-D weights, got {list(x.shape)} and {list(w.shape)}")
    kh, kw, in_c, out_c = w.shape
    if x.shape[2] != in_c:
        raise ShapeError(f"Conv2D channel mismatch: input has {x.shape[2]} channels, weights expect {in_c}")
    if b.shape != (out_c,):
        raise ShapeError(f"Conv2D bias shape {list(b.shape)} does not match {out_c} filters")

    if backend is Backend.ACCELERATED:
        cols = im2col_array(x, (kh, kw), stride, padding)
        oh = conv_output_size(x.shape[0], kh, stride, padding)
        ow = conv_output_size(x.shape[1], kw, stride, padding)
        return (gemm(cols, w.reshape(kh * kw * in_c, out_c)) + b).reshape(oh, ow, out_c)

    if kh > x.shape[0] + 2 * padding or kw > x.shape[1] + 2 * padding:
        raise ShapeError(f"Kernel {kh}x{kw} is larger than padded input")
    return _direct_conv(x, w, b, stride, padding)


def conv2d(input: Tensor, weights: Tensor, bias: Tensor, stride: int = 1, padding: int = 0,
           backend: Backend = Backend.ACCELERATED) -> Tensor:
    """Cross-correlation (no kernel flip) plus bias."""
    out = _conv_arrays(input.array, weights.array, bias.array, stride, padding, Backend(backend))
    return Tensor.from_array(out, copy=False)


def max_pool_array(x: np.ndarray, pool: int, stride: int) -> np.ndarray:
    windows = sliding_window_view(x, (pool, pool), axis=(0, 1))[::stride, ::stride]
    return windows.max(axis=(3, 4))


def _dense_arrays(x: np.ndarray, w: np.ndarray, b: np.ndarray, backend: Backend) -> np.ndarray:
    if x.ndim != 1 or w.ndim != 2 or w.shape[0] != x.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(
            f"Dense shape mismatch: input {list(x.shape)}, weights {list(w.shape)}, bias {list(b.shape)}"
        )
    if backend is Backend.ACCELERATED:
        return gemm(x[None, :], w)[0] + b

    out = np.empty(w.shape[1], dtype=np.float32)
    for unit in range(w.shape[1]):
        out[unit] = np.dot(x, w[:, unit]) + b[unit]
    return out


def softmax_array(x: np.ndarray) -> np.ndarray:
    exps = np.exp(x - np.max(x))
    return (exps / np.sum(exps)).astype(np.float32)


def _apply(layer: LayerSpec, x: np.ndarray, params: Optional[LayerParams], backend: Backend) -> np.ndarray:
    kind = layer.kind
    if kind is LayerKind.CONV2D:
        return _conv_arrays(x, params.weights.array, params.bias.array, layer.stride, layer.padding, backend)
    if kind is LayerKind.DENSE:
        return _dense_arrays(x, params.weights.array, params.bias.array, backend)
    if kind is LayerKind.MAXPOOL2D:
        if x.ndim != 3 or layer.pool > min(x.shape[0], x.shape[1]):
            raise ShapeError(f"MaxPool2D({layer.pool}) cannot pool input {list(x.shape)}")
        return max_pool_array(x, layer.pool, layer.stride)
    if kind is LayerKind.FLATTEN:
        return x.reshape(-1)
    if kind is LayerKind.RELU:
        return np.maximum(x, np.float32(0))
    if kind is LayerKind.SOFTMAX:
        if x.ndim != 1:
            raise ShapeError(f"Softmax needs a flat input, got {list(x.shape)}")
        return softmax_array(x)
    raise ShapeError(f"Unknown layer kind: {kind}")


def apply_layer(layer: LayerSpec, input: Tensor, params: Optional[LayerParams] = None,
                backend: Backend = Backend.REFERENCE) -> Tensor:
    if layer.kind.has_params and params is None:
        raise ShapeError(f"{layer} needs parameters")
    return Tensor.from_array(_apply(layer, input.array, params, Backend(backend)), copy=False)


# ---------------------------------------------------------------------------
# plans and forward


def plan_execution(model: Model, supported_kinds: Iterable[LayerKind] = DEFAULT_ACCELERATED_KINDS) -> ExecutionPlan:
    supported = frozenset(LayerKind(k) for k in supported_kinds)
    plan = ExecutionPlan(tuple(
        Backend.ACCELERATED if layer.kind in supported else Backend.REFERENCE
        for layer in model.layers
    ))
    logger.debug("Execution plan for %s: %s", model.metadata.name, plan.describe(model))
    return plan


def _checked_plan(model: Model, plan: Optional[ExecutionPlan]) -> ExecutionPlan:
    if plan is None:
        return plan_execution(model)
    if len(plan) != len(model.layers):
        raise ShapeError(f"Plan covers {len(plan)} layers but the model has {len(model.layers)}")
    return plan


def forward_activations(model: Model, input: Tensor, plan: Optional[ExecutionPlan] = None) -> List[Tensor]:
    """Every activation edge: the input followed by each layer's output."""
    if input.shape != model.input_shape:
        raise ShapeError(f"Input shape {list(input.shape)} does not match model input {list(model.input_shape)}")
    plan = _checked_plan(model, plan)

    x = input.array
    edges = [input]
    for layer, params, backend in zip(model.layers, model.params, plan):
        x = _apply(layer, x, params, backend)
        edges.append(Tensor.from_array(x, copy=False))
    return edges


def forward(model: Model, input: Tensor, plan: Optional[ExecutionPlan] = None) -> Tensor:
    if input.shape != model.input_shape:
        raise ShapeError(f"Input shape {list(input.shape)} does not match model input {list(model.input_shape)}")
    plan = _checked_plan(model, plan)

    x = input.array
    for layer, params, backend in zip(model.layers, model.params, plan):
        x = _apply(layer, x, params, backend)
    return Tensor.from_array(x, copy=False)


def predict(model, input: Tensor, plan: Optional[ExecutionPlan] = None) -> int:
    """Argmax of the model output; the lowest index wins ties. Accepts float or quantized models."""
    return int(np.argmax(model.infer(input, plan).array))


# ---------------------------------------------------------------------------
# construction


def init_params(layers: Sequence[LayerSpec], input_shape: Sequence[int], seed: int) -> Tuple[Optional[LayerParams], ...]:
    """He-uniform weights in +/- sqrt(6 / fan_in), zero biases, drawn in layer order."""
    rng = np.random.default_rng(seed)
    params = []
    shape = tuple(input_shape)

    for index, layer in enumerate(layers):
        if layer.kind is LayerKind.CONV2D:
            kh, kw = layer.kernel
            w_shape = (kh, kw, shape[2], layer.out_channels)
            fan_in = kh * kw * shape[2]
        elif layer.kind is LayerKind.DENSE:
            w_shape = (shape[0], layer.units)
            fan_in = shape[0]
        else:
            params.append(None)
            shape = _layer_output_shape(index, layer, shape, None)
            continue

        bound = math.sqrt(6.0 / fan_in)
        weights = rng.uniform(-bound, bound, size=w_shape).astype(np.float32)
        bias = np.zeros(w_shape[-1], dtype=np.float32)
        layer_params = LayerParams(Tensor.from_array(weights, copy=False), Tensor.from_array(bias, copy=False))
        params.append(layer_params)
        shape = _layer_output_shape(index, layer, shape, layer_params)

    return tuple(params)


def build_model(layers: Sequence[LayerSpec], input_shape: Sequence[int], class_names: Sequence[str],
                seed: int = 0, name: str = "model") -> Model:
    model = Model(
        layers=tuple(layers),
        params=init_params(layers, input_shape, seed),
        input_shape=tuple(input_shape),
        class_names=tuple(class_names),
        metadata=ModelMetadata(name=name, seed=seed),
    )
    infer_shapes(model)
    return model


def canonical_layers(num_classes: int) -> List[LayerSpec]:
    return [
        LayerSpec.conv2d(8, 3),
        LayerSpec.relu(),
        LayerSpec.maxpool2d(2),
        LayerSpec.conv2d(16, 3),
        LayerSpec.relu(),
        LayerSpec.maxpool2d(2),
        LayerSpec.flatten(),
        LayerSpec.dense(num_classes),
        LayerSpec.softmax(),
    ]


def canonical_cnn(input_shape: Sequence[int] = (28, 28, 1),
                  class_names: Sequence[str] = tuple(str(d) for d in range(10)),
                  seed: int = 0, name: str = "canonical_cnn") -> Model:
    """Conv(8) -> ReLU -> Pool -> Conv(16) -> ReLU -> Pool -> Flatten -> Dense -> Softmax."""
    return build_model(canonical_layers(len(class_names)), input_shape, class_names, seed, name)
