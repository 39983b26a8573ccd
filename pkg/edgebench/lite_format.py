# edgebench/lite_format.py
"""
The .plite binary model format.

Little-endian, fixed-width fields, one canonical encoding per model: parsing
a file produced here and writing it back yields the same bytes. Pruned
weights are stored densely, so file size depends on structure only.
See docs/plite-format.md for the byte-level layout and a worked example.
"""
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .compressor import QuantModel, QuantTensor
from .errors import CalibrationError, LiteFormatError, QuantizationError, ShapeError, UnsupportedVersionError
from .nn_engine import LayerKind, LayerParams, LayerSpec, Model, ModelMetadata, infer_shapes
from .quantized import QuantParams
from .tensor_core import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"PLIT"
FORMAT_VERSION = 1
FLAG_QUANTIZED = 0x0001
KNOWN_FLAGS = FLAG_QUANTIZED

KIND_TAGS = {
    LayerKind.CONV2D: 1,
    LayerKind.MAXPOOL2D: 2,
    LayerKind.FLATTEN: 3,
    LayerKind.DENSE: 4,
    LayerKind.RELU: 5,
    LayerKind.SOFTMAX: 6,
}
TAG_KINDS = {tag: kind for kind, tag in KIND_TAGS.items()}

DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("i1"): 2, np.dtype("<i4"): 3}
TAG_DTYPES = {tag: dtype for dtype, tag in DTYPE_TAGS.items()}

AnyModel = Union[Model, QuantModel]
PathLike = Union[str, Path]


@dataclass(frozen=True)
class LiteHeader:
    version: int
    flags: int

    @property
    def quantized(self) -> bool:
        return bool(self.flags & FLAG_QUANTIZED)


# ---------------------------------------------------------------------------
# writing


class _Writer:
    def __init__(self):
        self.buffer = io.BytesIO()

    def pack(self, fmt: str, *values) -> None:
        self.buffer.write(struct.pack("<" + fmt, *values))

    def text(self, value: str) -> None:
        encoded = value.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise LiteFormatError(f"String too long to encode ({len(encoded)} bytes)", self.buffer.tell())
        self.pack("H", len(encoded))
        self.buffer.write(encoded)

    def tensor(self, array: np.ndarray, dtype: np.dtype) -> None:
        array = np.ascontiguousarray(array, dtype=dtype)
        self.pack("BB", DTYPE_TAGS[np.dtype(dtype)], array.ndim)
        self.pack(f"{array.ndim}I", *array.shape)
        self.pack("I", array.nbytes)
        self.buffer.write(array.tobytes())

    def getvalue(self) -> bytes:
        return self.buffer.getvalue()


def _layer_attributes(layer: LayerSpec) -> Tuple[int, ...]:
    if layer.kind is LayerKind.CONV2D:
        return (layer.out_channels, layer.kernel[0], layer.kernel[1], layer.stride, layer.padding)
    if layer.kind is LayerKind.MAXPOOL2D:
        return (layer.pool, layer.stride)
    if layer.kind is LayerKind.DENSE:
        return (layer.units,)
    return ()


def to_bytes(model: AnyModel) -> bytes:
    quantized = isinstance(model, QuantModel)
    if quantized:
        if not model.is_calibrated:
            raise CalibrationError("Only calibrated quantized models can be exported")
        model.dequantized_model().validate()
    else:
        model.validate()

    meta = model.metadata
    if meta.seed < 0:
        raise LiteFormatError(f"Seed {meta.seed} cannot be stored as u64", 0)

    out = _Writer()
    out.buffer.write(MAGIC)
    out.pack("HH", FORMAT_VERSION, FLAG_QUANTIZED if quantized else 0)

    out.text(meta.name)
    out.pack("QIf", meta.seed, meta.epochs, meta.sparsity)

    out.pack("B", len(model.input_shape))
    out.pack(f"{len(model.input_shape)}I", *model.input_shape)

    out.pack("H", len(model.class_names))
    for name in model.class_names:
        out.text(name)

    out.pack("H", len(model.layers))
    for layer in model.layers:
        attributes = _layer_attributes(layer)
        out.pack("B", KIND_TAGS[layer.kind])
        out.pack(f"{len(attributes)}I", *attributes)

    if quantized:
        out.pack("H", len(model.activations))
        for edge in model.activations:
            out.pack("fi", edge.scale, edge.zero_point)
        for index in model.weight_layers():
            weights = model.weights[index]
            out.tensor(weights.q, np.dtype("i1"))
            out.pack("fi", weights.scale, weights.zero_point)
            out.tensor(model.biases[index], np.dtype("<i4"))
    else:
        for params in model.params:
            if params is not None:
                out.tensor(params.weights.array, np.dtype("<f4"))
                out.tensor(params.bias.array, np.dtype("<f4"))

    return out.getvalue()


def export_lite(model: AnyModel, path: PathLike) -> int:
    payload = to_bytes(model)
    Path(path).write_bytes(payload)
    logger.info("Exported %s (%s) to %s: %d bytes", model.metadata.name,
                "int8" if isinstance(model, QuantModel) else "fp32", path, len(payload))
    return len(payload)


# ---------------------------------------------------------------------------
# reading


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise LiteFormatError(f"Truncated file while reading {what}", self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what: str) -> str:
        (length,) = self.unpack("H", f"{what} length")
        start = self.offset
        try:
            return self.take(length, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise LiteFormatError(f"Invalid UTF-8 in {what}", start) from exc

    def tensor(self, expected: np.dtype, what: str) -> np.ndarray:
        start = self.offset
        tag, rank = self.unpack("BB", f"{what} header")
        if TAG_DTYPES.get(tag) != np.dtype(expected):
            raise LiteFormatError(f"Unexpected dtype tag {tag} for {what}", start)
        if rank < 1:
            raise LiteFormatError(f"Tensor rank must be positive for {what}", start)
        shape = self.unpack(f"{rank}I", f"{what} shape")
        (nbytes,) = self.unpack("I", f"{what} byte length")
        dtype = np.dtype(expected)
        if nbytes != int(np.prod(shape)) * dtype.itemsize:
            raise LiteFormatError(f"Declared byte length {nbytes} does not match shape {list(shape)} of {what}",
                                  self.offset - 4)
        return np.frombuffer(self.take(nbytes, what), dtype=dtype).reshape(shape).copy()


def _read_layer(reader: _Reader, index: int) -> LayerSpec:
    start = reader.offset
    (tag,) = reader.unpack("B", f"layer {index} kind")
    kind = TAG_KINDS.get(tag)
    if kind is None:
        raise LiteFormatError(f"Unknown layer kind tag {tag}", start)
    try:
        if kind is LayerKind.CONV2D:
            out_channels, kh, kw, stride, padding = reader.unpack("5I", f"layer {index} attributes")
            return LayerSpec(kind, out_channels=out_channels, kernel=(kh, kw), stride=stride, padding=padding)
        if kind is LayerKind.MAXPOOL2D:
            pool, stride = reader.unpack("2I", f"layer {index} attributes")
            return LayerSpec(kind, pool=pool, stride=stride)
        if kind is LayerKind.DENSE:
            (units,) = reader.unpack("I", f"layer {index} attributes")
            return LayerSpec(kind, units=units)
    except ShapeError as exc:
        raise LiteFormatError(f"Invalid attributes for layer {index}: {exc}", start) from exc
    return LayerSpec(kind)


def read_header(path: PathLike) -> LiteHeader:
    with open(path, "rb") as f:
        return _read_header(_Reader(f.read(8)))


def _read_header(reader: _Reader) -> LiteHeader:
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise LiteFormatError(f"Bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, flags = reader.unpack("HH", "version and flags")
    if version > FORMAT_VERSION or version == 0:
        raise UnsupportedVersionError(f"Unsupported .plite version {version} (this build reads {FORMAT_VERSION})", 4)
    if flags & ~KNOWN_FLAGS:
        raise LiteFormatError(f"Unknown flag bits 0x{flags:04x}", 6)
    return LiteHeader(version, flags)


def from_bytes(data: bytes) -> AnyModel:
    reader = _Reader(data)
    header = _read_header(reader)

    name = reader.text("model name")
    seed, epochs, sparsity = reader.unpack("QIf", "metadata")
    metadata = ModelMetadata(name=name, seed=seed, epochs=epochs, sparsity=float(sparsity))

    (rank,) = reader.unpack("B", "input rank")
    input_shape = reader.unpack(f"{rank}I", "input shape")
    (class_count,) = reader.unpack("H", "class count")
    class_names = tuple(reader.text(f"class name {i}") for i in range(class_count))
    (layer_count,) = reader.unpack("H", "layer count")
    layers = tuple(_read_layer(reader, i) for i in range(layer_count))
    weight_layers = [i for i, layer in enumerate(layers) if layer.kind.has_params]

    if header.quantized:
        edges_at = reader.offset
        (edge_count,) = reader.unpack("H", "activation count")
        if edge_count != layer_count + 1:
            raise LiteFormatError(f"Expected {layer_count + 1} activation edges, found {edge_count}", edges_at)
        try:
            activations = tuple(QuantParams(*reader.unpack("fi", f"activation {i}")) for i in range(edge_count))
        except ValueError as exc:
            raise LiteFormatError(f"Invalid activation parameters: {exc}", edges_at) from exc
        weights, biases = {}, {}
        for index in weight_layers:
            q = reader.tensor(np.dtype("i1"), f"layer {index} weights")
            scale, zero_point = reader.unpack("fi", f"layer {index} weight scale")
            try:
                weights[index] = QuantTensor(q, float(scale), zero_point)
            except QuantizationError as exc:
                raise LiteFormatError(str(exc), reader.offset - 8) from exc
            biases[index] = reader.tensor(np.dtype("<i4"), f"layer {index} bias").astype(np.int32)
        model: AnyModel = QuantModel(layers, input_shape, class_names, metadata, weights,
                                     biases=biases, activations=activations)
    else:
        params: List[Optional[LayerParams]] = [None] * layer_count
        for index in weight_layers:
            weights = reader.tensor(np.dtype("<f4"), f"layer {index} weights")
            bias = reader.tensor(np.dtype("<f4"), f"layer {index} bias")
            params[index] = LayerParams(Tensor.from_array(weights, copy=False), Tensor.from_array(bias, copy=False))
        model = Model(layers, tuple(params), input_shape, class_names, metadata)

    if reader.offset != len(data):
        raise LiteFormatError(f"{len(data) - reader.offset} trailing bytes after model", reader.offset)

    try:
        infer_shapes(model.dequantized_model() if header.quantized else model)
    except ShapeError as exc:
        raise LiteFormatError(f"Inconsistent model structure: {exc}", reader.offset) from exc
    return model


def import_lite(path: PathLike) -> AnyModel:
    return from_bytes(Path(path).read_bytes())


def model_size(path: PathLike) -> int:
    return Path(path).stat().st_size
