# edgebench/trainer.py
"""
Mini-batch training, evaluation, and the two fine-tuning variants used after
compression: mask-preserving (after pruning) and fake-quantized (after int8
quantization, straight-through gradients).

Training runs batched numpy kernels of its own; evaluation goes through the
inference engine so accuracies match what the benchmark harness measures.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datasets import LabeledDataset
from .errors import ConfigError, DatasetError, MaskError, QuantizationError, ShapeError, TrainingError
from .nn_engine import ExecutionPlan, LayerKind, LayerParams, Model, infer_shapes, plan_execution
from .tensor_core import Tensor

logger = logging.getLogger(__name__)

Batch = Union[LabeledDataset, Tuple[np.ndarray, np.ndarray]]
ParamArrays = List[Optional[List[np.ndarray]]]


class Optimizer(Enum):
    SGD = "sgd"
    SGD_MOMENTUM = "sgd_momentum"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.01
    seed: int = 0
    optimizer: Optimizer = Optimizer.SGD_MOMENTUM
    momentum: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")

    def with_epochs(self, epochs: int) -> "TrainConfig":
        return replace(self, epochs=epochs)


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    train_accuracy: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


class LayerGradients(NamedTuple):
    weights: np.ndarray
    bias: np.ndarray


# ---------------------------------------------------------------------------
# parameter plumbing


def model_arrays(model: Model, dtype=np.float32) -> ParamArrays:
    """Writable copies of every layer's (weights, bias), aligned with ``model.layers``."""
    return [
        None if p is None else [np.array(p.weights.array, dtype=dtype), np.array(p.bias.array, dtype=dtype)]
        for p in model.params
    ]


def _to_model(model: Model, params: ParamArrays, **metadata) -> Model:
    layer_params = [
        None if p is None else LayerParams(Tensor.from_array(p[0]), Tensor.from_array(p[1]))
        for p in params
    ]
    return model.with_params(layer_params, **metadata)


def _batch_arrays(batch: Batch) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, LabeledDataset):
        return batch.images, batch.labels
    images, labels = batch
    return np.asarray(images), np.asarray(labels, dtype=np.int64)


def _check_trainable(model: Model) -> None:
    infer_shapes(model)
    if model.layers[-1].kind is not LayerKind.SOFTMAX:
        raise ShapeError("Training needs a model whose final layer is Softmax")


def fake_quantize(weights: np.ndarray, scale: float) -> np.ndarray:
    """Symmetric int8 quantize-dequantize on the given per-tensor scale."""
    q = np.clip(np.rint(weights / weights.dtype.type(scale)), -127, 127)
    return (q * weights.dtype.type(scale)).astype(weights.dtype)


# ---------------------------------------------------------------------------
# batched kernels


def _conv_forward(x, w, b, stride, padding):
    kh, kw, in_c, out_c = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    batch, oh, ow = windows.shape[:3]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(batch * oh * ow, kh * kw * in_c)
    out = cols @ w.reshape(-1, out_c) + b
    return out.reshape(batch, oh, ow, out_c), (cols, xp.shape, x.shape)


def _conv_backward(dout, cache, w, stride, padding, need_input_grad):
    cols, padded_shape, input_shape = cache
    kh, kw, in_c, out_c = w.shape
    batch, oh, ow, _ = dout.shape
    flat = dout.reshape(-1, out_c)

    dw = (cols.T @ flat).reshape(w.shape)
    db = flat.sum(axis=0)
    if not need_input_grad:
        return None, dw, db

    dcols = (flat @ w.reshape(-1, out_c).T).reshape(batch, oh, ow, kh, kw, in_c)
    dxp = np.zeros(padded_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dcols[:, :, :, i, j, :]
    if padding:
        dxp = dxp[:, padding:padding + input_shape[1], padding:padding + input_shape[2], :]
    return dxp, dw, db


def _pool_forward(x, pool, stride):
    windows = sliding_window_view(x, (pool, pool), axis=(1, 2))[:, ::stride, ::stride]
    batch, oh, ow, channels = windows.shape[:4]
    flat = windows.reshape(batch, oh, ow, channels, pool * pool)
    # argmax picks the first maximum, so ties route the gradient to the lowest window index
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def _pool_backward(dout, cache, pool, stride):
    arg, input_shape = cache
    _, oh, ow, _ = dout.shape
    dx = np.zeros(input_shape, dtype=dout.dtype)
    for index in range(pool * pool):
        i, j = divmod(index, pool)
        dx[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dout * (arg == index)
    return dx


def _loss_and_grads(model: Model, params: ParamArrays, images: np.ndarray, labels: np.ndarray,
                    fake_scales: Optional[Mapping[int, float]] = None,
                    need_grads: bool = True):
    """Mean cross-entropy over the batch, the softmax outputs, and per-layer gradients."""
    dtype = next(p[0].dtype for p in params if p is not None)
    x = np.asarray(images, dtype=dtype)
    batch = x.shape[0]
    layers = model.layers
    caches = []
    used_weights: Dict[int, np.ndarray] = {}

    for index, layer in enumerate(layers[:-1]):
        kind = layer.kind
        if kind.has_params:
            w, b = params[index]
            if fake_scales is not None:
                w = fake_quantize(w, fake_scales[index])
            used_weights[index] = w
        if kind is LayerKind.CONV2D:
            x, cache = _conv_forward(x, w, b, layer.stride, layer.padding)
        elif kind is LayerKind.DENSE:
            cache = x
            x = x @ w + b
        elif kind is LayerKind.MAXPOOL2D:
            x, cache = _pool_forward(x, layer.pool, layer.stride)
        elif kind is LayerKind.FLATTEN:
            cache = x.shape
            x = x.reshape(batch, -1)
        elif kind is LayerKind.RELU:
            cache = x > 0
            x = x * cache
        else:
            raise ShapeError(f"Cannot train through layer {index} ({layer})")
        caches.append(cache)

    shifted = x - x.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(batch), labels].mean())
    probs = np.exp(log_probs)
    if not need_grads:
        return loss, probs, None

    grads: List[Optional[LayerGradients]] = [None] * len(layers)
    delta = probs.copy()
    delta[np.arange(batch), labels] -= 1
    delta /= batch

    for index in range(len(layers) - 2, -1, -1):
        layer = layers[index]
        kind = layer.kind
        cache = caches[index]
        need_input_grad = index > 0
        if kind is LayerKind.CONV2D:
            delta, dw, db = _conv_backward(delta, cache, used_weights[index], layer.stride, layer.padding,
                                           need_input_grad)
            grads[index] = LayerGradients(dw, db)
        elif kind is LayerKind.DENSE:
            grads[index] = LayerGradients(cache.T @ delta, delta.sum(axis=0))
            delta = delta @ used_weights[index].T if need_input_grad else None
        elif kind is LayerKind.MAXPOOL2D:
            delta = _pool_backward(delta, cache, layer.pool, layer.stride)
        elif kind is LayerKind.FLATTEN:
            delta = delta.reshape(cache)
        elif kind is LayerKind.RELU:
            delta = delta * cache
        if delta is None:
            break

    return loss, probs, grads


def batch_loss(model: Model, batch: Batch, params: Optional[ParamArrays] = None) -> float:
    _check_trainable(model)
    images, labels = _batch_arrays(batch)
    params = model_arrays(model) if params is None else params
    return _loss_and_grads(model, params, images, labels, need_grads=False)[0]


def gradients(model: Model, batch: Batch, params: Optional[ParamArrays] = None) -> List[Optional[LayerGradients]]:
    """Analytic gradients of the mean cross-entropy; ``params`` may override the model's (e.g. float64 copies)."""
    _check_trainable(model)
    images, labels = _batch_arrays(batch)
    if len(labels) == 0:
        raise DatasetError("Cannot compute gradients of an empty batch")
    params = model_arrays(model) if params is None else params
    return _loss_and_grads(model, params, images, labels)[2]


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, data: LabeledDataset, plan: Optional[ExecutionPlan] = None) -> Tuple[float, float]:
    """(accuracy, mean cross-entropy) over ``data``, one image at a time through ``model.infer``."""
    if len(data) == 0:
        raise DatasetError("Cannot evaluate on an empty dataset")
    if int(data.labels.max()) >= len(model.class_names):
        raise DatasetError(f"Labels exceed the model's {len(model.class_names)} classes")
    if plan is None:
        plan = plan_execution(model)

    correct = 0
    losses = []
    for image, label in data:
        probs = model.infer(image, plan).array
        if int(np.argmax(probs)) == label:
            correct += 1
        losses.append(-math.log(max(float(probs[label]), 1e-12)))
    return correct / len(data), math.fsum(losses) / len(data)


# ---------------------------------------------------------------------------
# optimisation loop


def _apply_masks(params: ParamArrays, masks: Mapping[int, np.ndarray]) -> None:
    for index, keep in masks.items():
        np.putmask(params[index][0], keep == 0, 0)


def _fit(model: Model, train_data: LabeledDataset, val_data: Optional[LabeledDataset], cfg: TrainConfig,
         masks: Optional[Mapping[int, np.ndarray]] = None,
         fake_scales: Optional[Mapping[int, float]] = None,
         stage: str = "train") -> Tuple[Model, TrainHistory]:
    _check_trainable(model)
    if len(train_data) == 0:
        raise DatasetError("Training data is empty")

    params = model_arrays(model)
    velocity = [None if p is None else [np.zeros_like(a) for a in p] for p in params]
    if masks:
        _apply_masks(params, masks)

    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    use_momentum = cfg.optimizer is Optimizer.SGD_MOMENTUM
    lr = cfg.learning_rate
    total = len(train_data)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(total)
        loss_sum = 0.0
        correct = 0
        for batch_no, start in enumerate(range(0, total, cfg.batch_size), start=1):
            idx = order[start:start + cfg.batch_size]
            labels = train_data.labels[idx]
            loss, probs, grads = _loss_and_grads(model, params, train_data.images[idx], labels, fake_scales)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"Non-finite loss during {stage} at epoch {epoch}, batch {batch_no}", epoch, batch_no
                )
            logger.debug("%s epoch %d batch %d loss %.5f", stage, epoch, batch_no, loss)
            loss_sum += loss * len(idx)
            correct += int((probs.argmax(axis=1) == labels).sum())

            for layer_params, layer_grads, layer_velocity in zip(params, grads, velocity):
                if layer_params is None:
                    continue
                for p, g, v in zip(layer_params, layer_grads, layer_velocity):
                    if use_momentum:
                        v *= cfg.momentum
                        v += g
                        p -= lr * v
                    else:
                        p -= lr * g
            if masks:
                _apply_masks(params, masks)

        history.train_loss.append(loss_sum / total)
        history.train_accuracy.append(correct / total)
        message = f"{stage} epoch {epoch}/{cfg.epochs}: loss {history.train_loss[-1]:.4f}, acc {history.train_accuracy[-1]:.4f}"

        if val_data is not None and len(val_data):
            current = _to_model(model, params)
            val_acc, val_loss = evaluate(current, val_data)
            history.val_accuracy.append(val_acc)
            history.val_loss.append(val_loss)
            message += f", val_loss {val_loss:.4f}, val_acc {val_acc:.4f}"
        logger.info(message)

    trained = _to_model(model, params, epochs=model.metadata.epochs + cfg.epochs)
    return trained, history


def train(model: Model, train_data: LabeledDataset, val_data: LabeledDataset,
          cfg: TrainConfig) -> Tuple[Model, TrainHistory]:
    return _fit(model, train_data, val_data, cfg)


def finetune_masked(model: Model, mask, data: LabeledDataset, cfg: TrainConfig,
                    val_data: Optional[LabeledDataset] = None) -> Model:
    """Fine-tune while holding every pruned weight at exactly zero."""
    masks = getattr(mask, "masks", mask)
    weight_layers = set(model.weight_layers())
    for index, keep in masks.items():
        if index not in weight_layers:
            raise MaskError(f"Mask given for layer {index}, which has no weights")
        if keep.shape != model.params[index].weights.shape:
            raise MaskError(
                f"Mask shape {list(keep.shape)} does not match layer {index} weights "
                f"{list(model.params[index].weights.shape)}"
            )
    tuned, _ = _fit(model, data, val_data, cfg, masks=masks, stage="finetune-masked")
    return tuned


def finetune_fakequant(model: Model, qparams, data: LabeledDataset, cfg: TrainConfig,
                       val_data: Optional[LabeledDataset] = None) -> Model:
    """
    Fine-tune against int8-rounded weights. The forward pass sees
    quantize-dequantize(w); gradients flow straight through the rounding into
    the float shadow weights, which are returned for re-quantization.
    """
    scales = qparams.weight_scales() if hasattr(qparams, "weight_scales") else dict(qparams)
    missing = [i for i in model.weight_layers() if i not in scales]
    if missing:
        raise QuantizationError(f"No quantization scale for weight layers {missing}")
    tuned, _ = _fit(model, data, val_data, cfg, fake_scales=scales, stage="finetune-fakequant")
    return tuned
