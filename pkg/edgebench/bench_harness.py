# edgebench/bench_harness.py
"""
Latency benchmarking with the first inference measured on its own.

Each image is timed from the moment its file is opened until the predicted
class is returned. The model file itself is parsed lazily inside the first
timed window, so t_first carries the one-off start-up cost and is kept out
of the mean / std / ste statistics computed over images 2..N.
"""
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .datasets import class_folders, image_files, load_pgm_image
from .errors import BenchmarkError
from .lite_format import import_lite
from .nn_engine import DEFAULT_ACCELERATED_KINDS, Backend, ExecutionPlan, LayerKind, plan_execution
from .tensor_core import Tensor

logger = logging.getLogger(__name__)

DEFAULT_BENCH_IMAGES = 100


class FormatTag(Enum):
    FLOAT = "float"
    LITE = "lite"
    LITE_PRUNED = "lite_pruned"
    QUANT = "quant"
    QUANT_PRUNED = "quant_pruned"


def stats(times_ms: Sequence[float]) -> Tuple[float, float, float]:
    """
    (mean, std, ste) of the warm inference times.

    std uses the square root and divides by the number of warm samples;
    ste = std / sqrt(number of warm samples).
    """
    if not times_ms:
        raise BenchmarkError("Statistics need at least one warm inference time")
    count = len(times_ms)
    mean = math.fsum(times_ms) / count
    std = math.sqrt(math.fsum((t - mean) ** 2 for t in times_ms) / count)
    return mean, std, std / math.sqrt(count)


@dataclass(frozen=True)
class BenchReport:
    model_id: str
    format: FormatTag
    backend: Backend
    n_images: int
    t_first_ms: float
    warm_times_ms: Tuple[float, ...]
    mean_ms: float
    std_ms: float
    ste_ms: float
    accuracy: float
    timestamp: datetime = field(default_factory=lambda: datetime.now(timezone.utc))
    environment: str = ""

    def __post_init__(self):
        object.__setattr__(self, "format", FormatTag(self.format))
        object.__setattr__(self, "backend", Backend(self.backend))
        object.__setattr__(self, "warm_times_ms", tuple(float(t) for t in self.warm_times_ms))
        if self.n_images < 2:
            raise BenchmarkError(f"A benchmark needs at least 2 images, got {self.n_images}")
        if len(self.warm_times_ms) != self.n_images - 1:
            raise BenchmarkError(
                f"Expected {self.n_images - 1} warm times for N={self.n_images}, got {len(self.warm_times_ms)}"
            )

    @classmethod
    def from_times(cls, model_id: str, format: FormatTag, backend: Backend, times_ms: Sequence[float],
                   accuracy: float, environment: str = "", timestamp: Optional[datetime] = None) -> "BenchReport":
        first, warm = times_ms[0], tuple(times_ms[1:])
        mean, std, ste = stats(warm)
        return cls(model_id, format, backend, len(times_ms), first, warm, mean, std, ste, accuracy,
                   timestamp or datetime.now(timezone.utc), environment)

    @property
    def single_sample(self) -> bool:
        """std and ste are defined as 0 when only one warm inference exists."""
        return self.n_images == 2

    @property
    def label(self) -> str:
        return f"{self.model_id} {self.format.value}/{self.backend.value}"

    def to_record(self) -> dict:
        return {
            "model_id": self.model_id,
            "format": self.format.value,
            "backend": self.backend.value,
            "n_images": self.n_images,
            "t_first_ms": self.t_first_ms,
            "warm_times_ms": list(self.warm_times_ms),
            "mean_ms": self.mean_ms,
            "std_ms": self.std_ms,
            "ste_ms": self.ste_ms,
            "accuracy": self.accuracy,
            "timestamp": self.timestamp,
            "environment": self.environment,
        }

    @classmethod
    def from_record(cls, record: dict) -> "BenchReport":
        timestamp = record["timestamp"]
        if isinstance(timestamp, str):
            timestamp = datetime.fromisoformat(timestamp)
        return cls(
            model_id=record["model_id"],
            format=FormatTag(record["format"]),
            backend=Backend(record["backend"]),
            n_images=int(record["n_images"]),
            t_first_ms=float(record["t_first_ms"]),
            warm_times_ms=tuple(record["warm_times_ms"]),
            mean_ms=float(record["mean_ms"]),
            std_ms=float(record["std_ms"]),
            ste_ms=float(record["ste_ms"]),
            accuracy=float(record["accuracy"]),
            timestamp=timestamp,
            environment=record.get("environment", ""),
        )


def environment_note() -> str:
    return f"{platform.platform()}; python {platform.python_version()}; numpy {np.__version__}"


def backend_plan(model, backend: Union[Backend, str],
                 supported_kinds: Iterable[LayerKind] = DEFAULT_ACCELERATED_KINDS) -> ExecutionPlan:
    """The plan a benchmark uses: every layer on reference, or the delegate split for accelerated."""
    if Backend(backend) is Backend.REFERENCE:
        return ExecutionPlan.uniform(len(model.layers), Backend.REFERENCE)
    return plan_execution(model, supported_kinds)


def format_tag_for(model) -> FormatTag:
    quantized = hasattr(model, "activations")
    pruned = model.metadata.sparsity > 0
    if quantized:
        return FormatTag.QUANT_PRUNED if pruned else FormatTag.QUANT
    return FormatTag.LITE_PRUNED if pruned else FormatTag.LITE


class InferenceSession:
    """Loads the model file on first use; no warm-up pass and no result caching."""

    def __init__(self, model_path: Union[str, Path], backend: Union[Backend, str],
                 supported_kinds: Iterable[LayerKind] = DEFAULT_ACCELERATED_KINDS):
        self.model_path = Path(model_path)
        self.backend = Backend(backend)
        self.supported_kinds = frozenset(supported_kinds)
        self._model = None
        self._plan = None

    def _prepare(self) -> None:
        self._model = import_lite(self.model_path)
        self._plan = backend_plan(self._model, self.backend, self.supported_kinds)

    @property
    def model(self):
        if self._model is None:
            self._prepare()
        return self._model

    @property
    def plan(self) -> ExecutionPlan:
        if self._plan is None:
            self._prepare()
        return self._plan

    def predict(self, image: Tensor) -> int:
        if self._model is None:
            self._prepare()
        return int(np.argmax(self._model.infer(image, self._plan).array))


def sample_images(data_root: Union[str, Path], n_images: int) -> Tuple[List[Tuple[Path, int]], Tuple[str, ...]]:
    """Pick ``n_images`` files round-robin across the sorted class folders."""
    folders = class_folders(data_root)
    per_class = [image_files(folder) for folder in folders]
    available = sum(len(files) for files in per_class)
    if available < n_images:
        raise BenchmarkError(f"Requested {n_images} images but {data_root} holds only {available}")

    picked: List[Tuple[Path, int]] = []
    round_no = 0
    while len(picked) < n_images:
        for label, files in enumerate(per_class):
            if round_no < len(files) and len(picked) < n_images:
                picked.append((files[round_no], label))
        round_no += 1
    return picked, tuple(folder.name for folder in folders)


def run_benchmark(model_path: Union[str, Path], data_root: Union[str, Path],
                  backend: Union[Backend, str] = Backend.ACCELERATED, n_images: int = DEFAULT_BENCH_IMAGES,
                  format_tag: Optional[FormatTag] = None,
                  supported_kinds: Iterable[LayerKind] = DEFAULT_ACCELERATED_KINDS,
                  clock: Callable[[], int] = time.perf_counter_ns,
                  timestamp: Optional[datetime] = None) -> BenchReport:
    if n_images < 2:
        raise BenchmarkError(f"A benchmark needs at least 2 images, got {n_images}")
    samples, class_names = sample_images(data_root, n_images)
    session = InferenceSession(model_path, backend, supported_kinds)

    times_ms: List[float] = []
    correct = 0
    for path, label in samples:
        start = clock()
        predicted = session.predict(load_pgm_image(path))
        times_ms.append((clock() - start) / 1e6)

        if len(times_ms) == 1 and session.model.class_names != class_names:
            raise BenchmarkError(
                f"Model classes {list(session.model.class_names)} do not match data classes {list(class_names)}"
            )
        correct += int(predicted == label)

    model = session.model
    report = BenchReport.from_times(
        model_id=model.metadata.name,
        format=format_tag or format_tag_for(model),
        backend=session.backend,
        times_ms=times_ms,
        accuracy=correct / n_images,
        environment=environment_note(),
        timestamp=timestamp,
    )
    if report.single_sample:
        logger.warning("Only one warm inference: std and ste are reported as 0")
    logger.info("Benchmarked %s: t_first %.2f ms, mean %.2f ms, std %.2f, ste %.2f, acc %.4f",
                report.label, report.t_first_ms, report.mean_ms, report.std_ms, report.ste_ms, report.accuracy)
    return report


# ---------------------------------------------------------------------------
# comparison


@dataclass(frozen=True)
class ComparisonRow:
    format: FormatTag
    backend: Backend
    t_first_ms: float
    mean_ms: float
    std_ms: float
    ste_ms: float
    accuracy: float
    speedup: float
    mean_ratio: float

    @property
    def label(self) -> str:
        return f"{self.format.value}/{self.backend.value}"


@dataclass(frozen=True)
class ComparisonTable:
    model_id: str
    baseline: str
    rows: Tuple[ComparisonRow, ...]


def _ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator > 0 else math.inf


def compare(reports: Sequence[BenchReport], baseline_index: int = 0) -> ComparisonTable:
    """
    Tabulate reports of one model against a baseline row:
    ``speedup`` = baseline mean / row mean, ``mean_ratio`` = row mean / baseline mean.
    """
    if len(reports) < 2:
        raise BenchmarkError("A comparison needs at least two reports")
    model_ids = {report.model_id for report in reports}
    if len(model_ids) != 1:
        raise BenchmarkError(f"Reports belong to different models: {sorted(model_ids)}")
    baseline = reports[baseline_index]

    rows = tuple(
        ComparisonRow(r.format, r.backend, r.t_first_ms, r.mean_ms, r.std_ms, r.ste_ms, r.accuracy,
                      _ratio(baseline.mean_ms, r.mean_ms), _ratio(r.mean_ms, baseline.mean_ms))
        for r in reports
    )

    by_key = {(r.format, r.backend): r for r in reports}
    for fmt in FormatTag:
        ref = by_key.get((fmt, Backend.REFERENCE))
        acc = by_key.get((fmt, Backend.ACCELERATED))
        if ref and acc and acc.mean_ms > ref.mean_ms:
            logger.warning("Accelerated %s mean %.3f ms is slower than reference %.3f ms",
                           fmt.value, acc.mean_ms, ref.mean_ms)

    return ComparisonTable(baseline.model_id, f"{baseline.format.value}/{baseline.backend.value}", rows)
