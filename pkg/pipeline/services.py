"""
Pipeline steps shared by the management commands: loading data and models,
training, pruning, quantizing, exporting and benchmarking.

Commands hold no pipeline logic of their own; they parse flags into a
RunConfig and call into here.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

from django.core.serializers.json import DjangoJSONEncoder
from django.utils import timezone
from django.utils.dateparse import parse_datetime

from edgebench.bench_harness import BenchReport, run_benchmark
from edgebench.compressor import (
    PruneMask,
    QuantModel,
    SparsitySweep,
    calibrate_activations,
    prune_magnitude,
    quantize_weights,
    select_sparsity,
    sparsity_sweep,
)
from edgebench.datasets import LabeledDataset, export_folder, load_dataset, split
from edgebench.errors import QuantizationError, ReportError
from edgebench.lite_format import export_lite, import_lite
from edgebench.nn_engine import Model, canonical_cnn
from edgebench.trainer import TrainHistory, evaluate, finetune_fakequant, finetune_masked, train

from .conf import RunConfig, accelerated_kinds, get_setting

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class ModelStore:
    """Reads and writes .plite files for the commands, logging every transfer."""

    @classmethod
    def load(cls, path: PathLike):
        model = import_lite(path)
        logger.info("Loaded %s from %s", model.metadata.name, path)
        return model

    @classmethod
    def load_float(cls, path: PathLike) -> Model:
        model = cls.load(path)
        if isinstance(model, QuantModel):
            raise QuantizationError(f"{path} holds an int8 model; this step needs a float model")
        return model

    @classmethod
    def save(cls, model, path: PathLike) -> int:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        return export_lite(model, path)


def load_splits(config: RunConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    data = load_dataset(config.data, seed=config.seed)
    if config.limit is not None and config.limit < len(data):
        data = data.take(config.limit)
    train_data, val_data = split(data, get_setting('TRAIN_FRACTION'), config.seed)
    logger.info("Data %s: %d train / %d validation images, %d classes",
                config.data, len(train_data), len(val_data), len(data.class_names))
    return train_data, val_data


@dataclass(frozen=True)
class TrainResult:
    model: Model
    history: TrainHistory
    val_accuracy: float
    size_bytes: int


def train_baseline(config: RunConfig) -> TrainResult:
    train_data, val_data = load_splits(config)
    model = canonical_cnn(train_data.image_shape, train_data.class_names, seed=config.seed,
                          name=config.output.stem)
    trained, history = train(model, train_data, val_data, config.train_config())
    val_accuracy, _ = evaluate(trained, val_data)
    size = ModelStore.save(trained, config.output)
    return TrainResult(trained, history, val_accuracy, size)


@dataclass(frozen=True)
class PruneResult:
    model: Model
    mask: PruneMask
    val_accuracy: float
    size_bytes: int


def _finetune_epochs(config: RunConfig) -> int:
    return config.epochs if config.epochs is not None else get_setting('FINETUNE_EPOCHS')


def prune_model(config: RunConfig) -> PruneResult:
    model = ModelStore.load_float(config.model)
    train_data, val_data = load_splits(config)
    sparsity = config.sparsity or 0.0
    pruned, mask = prune_magnitude(model, sparsity, get_setting('PRUNE_SCOPE'))
    epochs = _finetune_epochs(config)
    if epochs:
        pruned = finetune_masked(pruned, mask, train_data, config.train_config(epochs))
    val_accuracy, _ = evaluate(pruned, val_data)
    size = ModelStore.save(pruned, config.output)
    return PruneResult(pruned, mask, val_accuracy, size)


@dataclass(frozen=True)
class SweepResult:
    sweep: SparsitySweep
    baseline_accuracy: float
    selected: float


def run_sweep(config: RunConfig) -> SweepResult:
    model = ModelStore.load_float(config.model)
    train_data, val_data = load_splits(config)
    baseline_accuracy, _ = evaluate(model, val_data)
    epochs = _finetune_epochs(config)
    sweep = sparsity_sweep(
        model, train_data, val_data,
        grid=get_setting('SPARSITY_GRID'),
        finetune_epochs=epochs,
        cfg=config.train_config(max(epochs, 1)),
        scope=get_setting('PRUNE_SCOPE'),
    )
    selected = select_sparsity(sweep, baseline_accuracy, get_setting('MAX_ACCURACY_DROP'))
    return SweepResult(sweep, baseline_accuracy, selected)


@dataclass(frozen=True)
class QuantizeResult:
    model: QuantModel
    float_accuracy: float
    quant_accuracy: float
    float_size_bytes: int
    size_bytes: int


def quantize_model(config: RunConfig) -> QuantizeResult:
    """Post-training int8 quantization, optionally preceded by fake-quant fine-tuning (``--epochs``)."""
    model = ModelStore.load_float(config.model)
    train_data, val_data = load_splits(config)
    float_accuracy, _ = evaluate(model, val_data)

    epochs = config.epochs or 0
    if epochs:
        model = finetune_fakequant(model, quantize_weights(model), train_data, config.train_config(epochs))

    qmodel = calibrate_activations(quantize_weights(model), train_data, get_setting('CALIBRATION_SAMPLES'))
    quant_accuracy, _ = evaluate(qmodel, val_data)
    size = ModelStore.save(qmodel, config.output)
    return QuantizeResult(qmodel, float_accuracy, quant_accuracy, config.model.stat().st_size, size)


def export_model(config: RunConfig, images: Optional[PathLike] = None, prefix: str = 't10k') -> Tuple[int, int]:
    """Re-export a model canonically; with ``images`` also write a folder-per-class benchmark set."""
    size = ModelStore.save(ModelStore.load(config.model), config.output)
    written = 0
    if images:
        data = load_dataset(config.data, seed=config.seed, prefix=prefix)
        if config.limit is not None and config.limit < len(data):
            data = data.take(config.limit)
        written = export_folder(data, images)
    return size, written


def run_bench(config: RunConfig) -> BenchReport:
    return run_benchmark(
        config.model, config.data,
        backend=config.backend,
        n_images=config.n_images,
        supported_kinds=accelerated_kinds(),
        timestamp=timezone.now(),
    )


def save_report(report: BenchReport, path: PathLike) -> int:
    payload = json.dumps(report.to_record(), cls=DjangoJSONEncoder, indent=2, sort_keys=True) + "\n"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(payload, encoding='utf-8')
    logger.info("Saved benchmark record %s to %s", report.label, path)
    return len(payload)


def load_report(path: PathLike) -> BenchReport:
    try:
        record = json.loads(Path(path).read_text(encoding='utf-8'))
        timestamp = parse_datetime(record['timestamp'])
        if timestamp is None:
            raise ValueError(f"bad timestamp {record['timestamp']!r}")
        record['timestamp'] = timestamp
        return BenchReport.from_record(record)
    except (KeyError, TypeError, ValueError) as exc:
        raise ReportError(f"{path} is not a benchmark record: {exc}") from exc
