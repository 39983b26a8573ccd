# edgebench/compressor.py
"""
Model compression: magnitude pruning, sparsity sweeps and selection, and
post-training int8 quantization with activation calibration.

Weights are quantized symmetrically per tensor into [-127, 127]; activations
asymmetrically per edge from calibrated ranges; biases become int32 on the
scale input_scale * weight_scale.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .datasets import LabeledDataset, floor_count
from .errors import CalibrationError, ConfigError, QuantizationError, ShapeError, TrainingError
from .nn_engine import (ExecutionPlan, LayerKind, LayerParams, LayerSpec, Model, ModelMetadata,
                        forward_activations, infer_shapes, max_pool_array, plan_execution, softmax_array)
from .quantized import (INT32_MAX, INT32_MIN, INT8_MAX, INT8_MIN, WEIGHT_QMAX, QuantParams, as_f32, dequantize,
                        int_conv2d, int_dense, int_relu, quantize_array, rescale)
from .tensor_core import Tensor
from .trainer import TrainConfig, evaluate, finetune_masked

logger = logging.getLogger(__name__)

DEFAULT_SPARSITY_GRID: Tuple[float, ...] = (0.25, 0.50, 0.60, 0.70, 0.80, 0.90, 0.95, 0.97, 0.99)

# Degenerate calibration ranges (min == max) are widened by this much on each side.
CALIBRATION_MARGIN = 1e-3


class PruneScope(Enum):
    PER_LAYER = "per_layer"
    GLOBAL = "global"


# ---------------------------------------------------------------------------
# pruning


@dataclass(frozen=True)
class PruneMask:
    """1 = kept, 0 = pruned; one array per weight layer index. Biases are never masked."""

    masks: Dict[int, np.ndarray]

    def __post_init__(self):
        frozen = {}
        for index, keep in self.masks.items():
            keep = np.array(keep, dtype=np.uint8)
            keep.setflags(write=False)
            frozen[int(index)] = keep
        object.__setattr__(self, "masks", frozen)

    @classmethod
    def ones(cls, model: Model) -> "PruneMask":
        return cls({i: np.ones(model.params[i].weights.shape, dtype=np.uint8) for i in model.weight_layers()})

    def layer_sparsity(self, index: int) -> float:
        keep = self.masks[index]
        return float((keep == 0).sum()) / keep.size

    def sparsity(self) -> float:
        total = sum(keep.size for keep in self.masks.values())
        return self.pruned_count() / total if total else 0.0

    def pruned_count(self) -> int:
        return sum(int((keep == 0).sum()) for keep in self.masks.values())

    def pruned_indices(self, index: int) -> np.ndarray:
        return np.flatnonzero(self.masks[index].reshape(-1) == 0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PruneMask):
            return NotImplemented
        return self.masks.keys() == other.masks.keys() and all(
            np.array_equal(self.masks[i], other.masks[i]) for i in self.masks
        )

    __hash__ = None


def _magnitude_keep(flat: np.ndarray, count: int) -> np.ndarray:
    """Zero the ``count`` smallest |w|; the stable sort breaks ties by ascending index."""
    keep = np.ones(flat.size, dtype=np.uint8)
    keep[np.argsort(np.abs(flat), kind="stable")[:count]] = 0
    return keep


def apply_mask(model: Model, mask: PruneMask, **metadata) -> Model:
    params = list(model.params)
    for index, keep in mask.masks.items():
        layer = params[index]
        if layer is None or layer.weights.shape != keep.shape:
            raise ShapeError(f"Mask for layer {index} does not align with the model")
        weights = np.where(keep == 1, layer.weights.array, np.float32(0))
        params[index] = LayerParams(Tensor.from_array(weights, copy=False), layer.bias)
    return model.with_params(params, **metadata)


def prune_magnitude(model: Model, sparsity: float,
                    scope: Union[PruneScope, str] = PruneScope.PER_LAYER) -> Tuple[Model, PruneMask]:
    if not 0.0 <= sparsity < 1.0:
        raise ConfigError(f"Sparsity must lie in [0, 1), got {sparsity}")
    scope = PruneScope(scope)
    indices = model.weight_layers()
    weights = {i: model.params[i].weights.array for i in indices}

    if scope is PruneScope.PER_LAYER:
        masks = {
            i: _magnitude_keep(w.reshape(-1), floor_count(sparsity, w.size)).reshape(w.shape)
            for i, w in weights.items()
        }
    else:
        pooled = np.concatenate([weights[i].reshape(-1) for i in indices])
        keep = _magnitude_keep(pooled, floor_count(sparsity, pooled.size))
        masks = {}
        offset = 0
        for i in indices:
            size = weights[i].size
            masks[i] = keep[offset:offset + size].reshape(weights[i].shape)
            offset += size

    mask = PruneMask(masks)
    pruned = apply_mask(model, mask, sparsity=float(sparsity))
    logger.info("Pruned %s to sparsity %.2f (%s): achieved %.4f",
                model.metadata.name, sparsity, scope.value, mask.sparsity())
    return pruned, mask


@dataclass(frozen=True)
class SweepRow:
    """``nonzero_params`` counts the weights the mask keeps plus every bias."""

    sparsity: float
    val_accuracy: float
    val_loss: float
    finetune_epochs: int
    nonzero_params: int
    total_params: int


@dataclass(frozen=True)
class SparsitySweep:
    rows: Tuple[SweepRow, ...]

    def __post_init__(self):
        rows = tuple(self.rows)
        object.__setattr__(self, "rows", rows)
        for prev, row in zip(rows, rows[1:]):
            if not row.sparsity > prev.sparsity:
                raise ConfigError("Sweep sparsities must be strictly increasing")
        for row in rows:
            if not 0.0 <= row.val_accuracy <= 1.0:
                raise ConfigError(f"Accuracy {row.val_accuracy} outside [0, 1] at sparsity {row.sparsity}")
            if not 0 <= row.nonzero_params <= row.total_params:
                raise ConfigError(f"Parameter counts {row.nonzero_params}/{row.total_params} are inconsistent "
                                  f"at sparsity {row.sparsity}")

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[SweepRow]:
        return iter(self.rows)


def sparsity_sweep(model: Model, train_data: LabeledDataset, val_data: LabeledDataset,
                   grid: Sequence[float] = DEFAULT_SPARSITY_GRID, finetune_epochs: int = 2,
                   cfg: Optional[TrainConfig] = None,
                   scope: Union[PruneScope, str] = PruneScope.PER_LAYER) -> SparsitySweep:
    """Prune a fresh copy of ``model`` at every grid point, fine-tune with the mask held, evaluate."""
    grid = [float(s) for s in grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError(f"Sparsity grid must be sorted ascending without repeats: {grid}")
    if finetune_epochs < 0:
        raise ConfigError(f"finetune_epochs must be >= 0, got {finetune_epochs}")
    cfg = cfg or TrainConfig(seed=model.metadata.seed)
    total = model.parameter_count()

    rows = []
    for sparsity in grid:
        pruned, mask = prune_magnitude(model, sparsity, scope)
        if finetune_epochs:
            try:
                pruned = finetune_masked(pruned, mask, train_data, cfg.with_epochs(finetune_epochs))
            except TrainingError as exc:
                raise TrainingError(f"sparsity {sparsity}: {exc}", exc.epoch, exc.batch) from exc
        accuracy, loss = evaluate(pruned, val_data)
        nonzero = total - mask.pruned_count()
        logger.info("sweep s=%.2f: %d/%d params, val_acc %.4f, val_loss %.4f",
                    sparsity, nonzero, total, accuracy, loss)
        rows.append(SweepRow(sparsity, accuracy, loss, finetune_epochs, nonzero, total))
    return SparsitySweep(tuple(rows))


def select_sparsity(sweep: SparsitySweep, baseline_acc: float, max_drop: float = 0.01) -> float:
    """Largest sparsity within ``max_drop`` of the baseline; otherwise the most accurate row."""
    if not len(sweep):
        raise ConfigError("Cannot select a sparsity from an empty sweep")
    qualifying = [row for row in sweep if row.val_accuracy >= baseline_acc - max_drop]
    if qualifying:
        return max(row.sparsity for row in qualifying)
    return max(sweep, key=lambda row: row.val_accuracy).sparsity


# ---------------------------------------------------------------------------
# quantization


@dataclass(frozen=True)
class QuantTensor:
    q: np.ndarray
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        q = np.array(self.q, dtype=np.int8)
        q.setflags(write=False)
        scale = as_f32(self.scale)
        if not np.isfinite(scale) or scale <= 0:
            raise QuantizationError(f"Weight scale must be positive and finite, got {self.scale}")
        if int(self.zero_point) != 0:
            raise QuantizationError(f"Weight zero point must be 0 for symmetric int8, got {self.zero_point}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", 0)

    def dequantize(self) -> np.ndarray:
        return dequantize(self.q, self.scale, self.zero_point)


@dataclass(frozen=True)
class QuantModel:
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, ...]
    class_names: Tuple[str, ...]
    metadata: ModelMetadata
    weights: Dict[int, QuantTensor]
    float_biases: Dict[int, np.ndarray] = field(default_factory=dict)
    biases: Dict[int, np.ndarray] = field(default_factory=dict)
    activations: Optional[Tuple[QuantParams, ...]] = None

    @property
    def is_calibrated(self) -> bool:
        return self.activations is not None

    def weight_layers(self) -> List[int]:
        return sorted(self.weights)

    def weight_scales(self) -> Dict[int, float]:
        return {i: t.scale for i, t in self.weights.items()}

    def bias_scale(self, index: int) -> float:
        return self.activations[index].scale * self.weights[index].scale

    def dequantized_model(self) -> Model:
        """Float model whose weights sit exactly on the int8 grid."""
        params = []
        for index, layer in enumerate(self.layers):
            if index not in self.weights:
                params.append(None)
                continue
            if index in self.float_biases:
                bias = self.float_biases[index]
            elif self.is_calibrated:
                bias = (self.biases[index].astype(np.float64) * self.bias_scale(index)).astype(np.float32)
            else:
                raise QuantizationError(f"No bias available for layer {index}")
            params.append(LayerParams(Tensor.from_array(self.weights[index].dequantize(), copy=False),
                                      Tensor.from_array(bias)))
        return Model(self.layers, tuple(params), self.input_shape, self.class_names, self.metadata)

    def infer(self, input: Tensor, plan: Optional[ExecutionPlan] = None) -> Tensor:
        return quantized_forward(self, input, plan)


def quantize_weights(model: Model) -> QuantModel:
    infer_shapes(model)
    weights = {}
    float_biases = {}
    for index in model.weight_layers():
        w = model.params[index].weights.array.astype(np.float64)
        if not np.all(np.isfinite(w)):
            raise QuantizationError(f"Layer {index} has non-finite weights")
        max_abs = float(np.max(np.abs(w)))
        if max_abs == 0.0:
            scale, q = 1.0, np.zeros(w.shape, dtype=np.int8)
        else:
            scale = max_abs / WEIGHT_QMAX
            q = np.clip(np.rint(w * WEIGHT_QMAX / max_abs), -WEIGHT_QMAX, WEIGHT_QMAX).astype(np.int8)
        weights[index] = QuantTensor(q, scale, 0)
        float_biases[index] = np.array(model.params[index].bias.array, dtype=np.float32)

    return QuantModel(model.layers, model.input_shape, model.class_names, model.metadata,
                      weights, float_biases)


def activation_params(lo: float, hi: float) -> QuantParams:
    """Asymmetric int8 parameters covering [lo, hi] widened to include 0."""
    if lo == hi:
        lo -= CALIBRATION_MARGIN
        hi += CALIBRATION_MARGIN
    lo = min(lo, 0.0)
    hi = max(hi, 0.0)
    scale = as_f32((hi - lo) / (INT8_MAX - INT8_MIN))
    zero_point = int(np.clip(np.rint(INT8_MIN - lo / scale), INT8_MIN, INT8_MAX))
    return QuantParams(scale, zero_point)


def _calibration_inputs(calib_data, samples: int) -> List[Tensor]:
    if isinstance(calib_data, LabeledDataset):
        return [calib_data[i][0] for i in range(min(samples, len(calib_data)))]
    return list(calib_data)[:samples]


def calibrate_activations(qmodel: QuantModel, calib_data, samples: int = 100) -> QuantModel:
    """Record per-edge min/max over ``samples`` float forwards and derive int8 activation parameters."""
    if samples < 1:
        raise CalibrationError(f"Calibration needs at least one sample, got {samples}")
    inputs = _calibration_inputs(calib_data, samples)
    if not inputs:
        raise CalibrationError("Calibration set is empty")

    float_model = qmodel.dequantized_model()
    plan = plan_execution(float_model)
    edge_count = len(qmodel.layers) + 1
    lo = np.full(edge_count, np.inf)
    hi = np.full(edge_count, -np.inf)
    for image in inputs:
        for edge, activation in enumerate(forward_activations(float_model, image, plan)):
            lo[edge] = min(lo[edge], float(activation.array.min()))
            hi[edge] = max(hi[edge], float(activation.array.max()))

    activations = tuple(activation_params(float(l), float(h)) for l, h in zip(lo, hi))

    biases = {}
    for index in qmodel.weights:
        bias = float_model.params[index].bias.array.astype(np.float64)
        scale = activations[index].scale * qmodel.weights[index].scale
        biases[index] = np.clip(np.rint(bias / scale), INT32_MIN, INT32_MAX).astype(np.int32)

    logger.info("Calibrated %d activation edges of %s on %d samples",
                edge_count, qmodel.metadata.name, len(inputs))
    float_biases = {i: float_model.params[i].bias.array.copy() for i in qmodel.weights}
    return replace(qmodel, activations=activations, biases=biases, float_biases=float_biases)


def quantized_forward(qmodel: QuantModel, input: Tensor, plan: Optional[ExecutionPlan] = None) -> Tensor:
    """
    Integer inference: int8 activations, int32 accumulation, requantization to
    each edge's parameters. A final Softmax runs in float on dequantized logits.
    """
    if not qmodel.is_calibrated:
        raise CalibrationError("Quantized model has no activation calibration")
    if input.shape != qmodel.input_shape:
        raise ShapeError(f"Input shape {list(input.shape)} does not match model input {list(qmodel.input_shape)}")
    if plan is None:
        plan = plan_execution(qmodel)
    elif len(plan) != len(qmodel.layers):
        raise ShapeError(f"Plan covers {len(plan)} layers but the model has {len(qmodel.layers)}")

    edges = qmodel.activations
    q = quantize_array(input.array, edges[0])

    for index, (layer, backend) in enumerate(zip(qmodel.layers, plan)):
        src, dst = edges[index], edges[index + 1]
        kind = layer.kind
        if kind is LayerKind.CONV2D or kind is LayerKind.DENSE:
            weights = qmodel.weights[index]
            multiplier = src.scale * weights.scale / dst.scale
            if kind is LayerKind.CONV2D:
                q = int_conv2d(q, src.zero_point, weights.q, qmodel.biases[index], layer.stride, layer.padding,
                               multiplier, dst.zero_point, backend)
            else:
                q = int_dense(q, src.zero_point, weights.q, qmodel.biases[index], multiplier, dst.zero_point,
                              backend)
        elif kind is LayerKind.RELU:
            q = rescale(int_relu(q, src.zero_point), src, dst)
        elif kind is LayerKind.MAXPOOL2D:
            q = rescale(max_pool_array(q, layer.pool, layer.stride), src, dst)
        elif kind is LayerKind.FLATTEN:
            q = rescale(q.reshape(-1), src, dst)
        elif kind is LayerKind.SOFTMAX:
            logits = dequantize(q, src.scale, src.zero_point)
            return Tensor.from_array(softmax_array(logits), copy=False)

    return Tensor.from_array(dequantize(q, edges[-1].scale, edges[-1].zero_point), copy=False)
