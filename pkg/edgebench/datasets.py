# edgebench/datasets.py
"""
Labeled image datasets: MNIST-style IDX files, folder-per-class PGM images,
and deterministic synthetic bar patterns. Also the stratified train/validation split.

All images are (h, w, 1) float32 with values in [0, 1].
"""
import gzip
import logging
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DatasetError
from .tensor_core import Tensor

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

PathLike = Union[str, Path]


def floor_count(fraction: float, total: int) -> int:
    """floor(fraction * total), tolerant of binary rounding such as 0.7 * 10."""
    return math.floor(fraction * total + 1e-9)


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: Tuple[str, ...]

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float32)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim == 3:
            images = images[..., None]
        if images.ndim != 4 or images.shape[3] != 1:
            raise DatasetError(f"Images must be (n, h, w, 1), got {list(images.shape)}")
        if images.shape[0] != labels.shape[0]:
            raise DatasetError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise DatasetError(f"Labels must lie in [0, {len(self.class_names)})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, index: int) -> Tuple[Tensor, int]:
        return Tensor.from_array(self.images[index]), int(self.labels[index])

    def __iter__(self) -> Iterator[Tuple[Tensor, int]]:
        for index in range(len(self)):
            yield self[index]

    @property
    def items(self) -> List[Tuple[Tensor, int]]:
        return list(self)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.class_names)

    def take(self, count: int) -> "LabeledDataset":
        return self.subset(np.arange(min(count, len(self))))

    def class_counts(self) -> List[int]:
        return np.bincount(self.labels, minlength=len(self.class_names)).tolist()


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _idx_header(data: bytes, magic: int, dims: int, path: PathLike) -> Tuple[int, ...]:
    size = 4 * (dims + 1)
    if len(data) < size:
        raise DatasetError("Truncated IDX header", str(path))
    found, *shape = struct.unpack_from(f">{dims + 1}I", data, 0)
    if found != magic:
        raise DatasetError(f"Bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", str(path))
    return tuple(shape)


def load_idx(images_path: PathLike, labels_path: PathLike,
             class_names: Optional[Sequence[str]] = None) -> LabeledDataset:
    image_bytes = _read_bytes(images_path)
    label_bytes = _read_bytes(labels_path)

    count, rows, cols = _idx_header(image_bytes, IDX_IMAGES_MAGIC, 3, images_path)
    (label_count,) = _idx_header(label_bytes, IDX_LABELS_MAGIC, 1, labels_path)
    if label_count != count:
        raise DatasetError(f"IDX count mismatch: {count} images but {label_count} labels", str(labels_path))

    pixels = np.frombuffer(image_bytes, dtype=np.uint8, offset=16)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, offset=8)
    if pixels.size < count * rows * cols:
        raise DatasetError("Truncated IDX image data", str(images_path))
    if labels.size < count:
        raise DatasetError("Truncated IDX label data", str(labels_path))

    images = pixels[:count * rows * cols].reshape(count, rows, cols, 1).astype(np.float32) / np.float32(255)
    labels = labels[:count].astype(np.int64)
    if class_names is None:
        # digit labels; at least the ten MNIST classes
        top = int(labels.max()) + 1 if count else 0
        class_names = [str(i) for i in range(max(top, 10))]

    logger.info("Loaded %d IDX images of %dx%d from %s", count, rows, cols, images_path)
    return LabeledDataset(images, labels, tuple(class_names))


# ---------------------------------------------------------------------------
# PGM folders


def parse_pgm(data: bytes, source: str = "<bytes>") -> Tuple[np.ndarray, int]:
    """Decode a binary (P5) 8-bit PGM; returns (uint8 pixels of shape (h, w), maxval)."""
    if data[:2] != b"P5":
        raise DatasetError("Not a binary PGM (P5) file", source)

    fields: List[int] = []
    pos = 2
    end = len(data)
    while len(fields) < 3:
        while pos < end and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= end:
            raise DatasetError("Truncated PGM header", source)
        if data[pos:pos + 1] == b"#":
            while pos < end and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < end and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise DatasetError(f"Malformed PGM header token {token!r}", source)
        fields.append(int(token))

    # exactly one whitespace byte separates maxval from the raster
    pos += 1
    width, height, maxval = fields
    if maxval > 255:
        raise DatasetError(f"Unsupported PGM depth (maxval {maxval}); only 8-bit images are read", source)
    if width < 1 or height < 1 or maxval < 1:
        raise DatasetError(f"Invalid PGM geometry {width}x{height}, maxval {maxval}", source)

    raster = data[pos:pos + width * height]
    if len(raster) < width * height:
        raise DatasetError("Truncated PGM raster", source)
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width), maxval


def read_pgm(path: PathLike) -> np.ndarray:
    """Read a PGM file as an (h, w, 1) float32 array scaled into [0, 1]."""
    pixels, maxval = parse_pgm(Path(path).read_bytes(), str(path))
    return (pixels.astype(np.float32) / np.float32(maxval))[..., None]


def load_pgm_image(path: PathLike) -> Tensor:
    return Tensor.from_array(read_pgm(path), copy=False)


def write_pgm(path: PathLike, pixels: np.ndarray) -> int:
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim == 3:
        pixels = pixels[..., 0]
    height, width = pixels.shape
    payload = f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()
    Path(path).write_bytes(payload)
    return len(payload)


def class_folders(root: PathLike) -> List[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError("Dataset root is not a directory", str(root))
    folders = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    if not folders:
        raise DatasetError("Dataset root has no class subdirectories", str(root))
    return folders


def image_files(folder: Path) -> List[Path]:
    return sorted((p for p in folder.iterdir() if p.is_file() and not p.name.startswith(".")),
                  key=lambda p: p.name)


def load_folder(root_path: PathLike) -> LabeledDataset:
    folders = class_folders(root_path)
    class_names = tuple(folder.name for folder in folders)

    images, labels = [], []
    shape = None
    for label, folder in enumerate(folders):
        files = image_files(folder)
        if not files:
            logger.warning("Class folder %s is empty", folder)
        for path in files:
            image = read_pgm(path)
            if shape is None:
                shape = image.shape
            elif image.shape != shape:
                raise DatasetError(
                    f"Mixed image dimensions: {list(image.shape)} differs from {list(shape)}", str(path)
                )
            images.append(image)
            labels.append(label)

    if not images:
        raise DatasetError("No images found", str(root_path))

    logger.info("Loaded %d images in %d classes from %s", len(images), len(class_names), root_path)
    return LabeledDataset(np.stack(images), np.array(labels), class_names)


def export_folder(ds: LabeledDataset, root: PathLike) -> int:
    """Write ``ds`` as root/<class_name>/<index>.pgm; returns the number of files written."""
    root = Path(root)
    for name in ds.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for index in range(len(ds)):
        pixels = np.rint(ds.images[index] * 255).clip(0, 255).astype(np.uint8)
        write_pgm(root / ds.class_names[ds.labels[index]] / f"{index:05d}.pgm", pixels)
    logger.info("Wrote %d PGM images under %s", len(ds), root)
    return len(ds)


# ---------------------------------------------------------------------------
# synthetic


@dataclass(frozen=True)
class SynthSpec:
    classes: int
    per_class: int
    image_size: int
    noise: float = 0.1

    def __post_init__(self):
        if self.classes < 2:
            raise DatasetError(f"Synthetic datasets need at least 2 classes, got {self.classes}")
        if self.per_class < 1 or self.image_size < 4 or self.noise < 0:
            raise DatasetError(f"Invalid synthetic dataset spec: {self}")


def class_pattern(label: int, classes: int, size: int) -> np.ndarray:
    """Even classes draw a horizontal bar, odd classes a vertical one, each pair at its own offset."""
    bands = math.ceil(classes / 2)
    band = label // 2
    thickness = max(1, size // 8)
    centre = round((band + 1) * size / (bands + 1))
    start = min(max(0, centre - thickness // 2), size - thickness)

    pattern = np.zeros((size, size), dtype=np.float32)
    if label % 2 == 0:
        pattern[start:start + thickness, :] = 1.0
    else:
        pattern[:, start:start + thickness] = 1.0
    return pattern


def synth_dataset(spec: SynthSpec, seed: int = 0) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    size = spec.image_size
    images = np.empty((spec.classes * spec.per_class, size, size, 1), dtype=np.float32)
    labels = np.repeat(np.arange(spec.classes), spec.per_class)

    for label in range(spec.classes):
        pattern = class_pattern(label, spec.classes, size)
        for offset in range(spec.per_class):
            noise = rng.normal(0.0, spec.noise, size=(size, size)) if spec.noise else 0.0
            images[label * spec.per_class + offset, :, :, 0] = np.clip(pattern + noise, 0.0, 1.0)

    names = tuple(f"pattern{label}" for label in range(spec.classes))
    return LabeledDataset(images, labels, names)


SYNTH_SOURCE = re.compile(r"^synth:(\d+)x(\d+)x(\d+)$")


def parse_synth_source(source: str) -> Optional[SynthSpec]:
    match = SYNTH_SOURCE.match(source.strip())
    if not match:
        return None
    classes, per_class, size = (int(g) for g in match.groups())
    return SynthSpec(classes, per_class, size)


def _find_idx_pair(root: Path, prefix: str) -> Optional[Tuple[Path, Path]]:
    candidates = sorted(p for p in root.iterdir() if "images-idx3-ubyte" in p.name)
    preferred = [p for p in candidates if p.name.startswith(prefix)] or candidates
    for images_path in preferred:
        labels_path = images_path.with_name(images_path.name.replace("images-idx3", "labels-idx1"))
        if labels_path.exists():
            return images_path, labels_path
    return None


def load_dataset(source: PathLike, seed: int = 0, prefix: str = "train") -> LabeledDataset:
    """
    Load from ``synth:<classes>x<per_class>x<size>``, a directory holding an IDX
    image/label pair (``prefix`` picks train vs t10k), or a folder-per-class root.
    """
    spec = parse_synth_source(str(source))
    if spec is not None:
        return synth_dataset(spec, seed)

    root = Path(source)
    if root.is_dir():
        pair = _find_idx_pair(root, prefix)
        if pair is not None:
            return load_idx(*pair)
        return load_folder(root)
    raise DatasetError("Dataset source not found", str(source))


# ---------------------------------------------------------------------------
# split


def split(ds: LabeledDataset, train_fraction: float = 0.7, seed: int = 0) -> Tuple[LabeledDataset, LabeledDataset]:
    """Seeded shuffle, then floor(train_fraction * count) items of every class go to train."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train_fraction must lie in (0, 1), got {train_fraction}")

    order = np.random.default_rng(seed).permutation(len(ds))
    shuffled_labels = ds.labels[order]
    in_train = np.zeros(len(ds), dtype=bool)

    for label, name in enumerate(ds.class_names):
        members = order[shuffled_labels == label]
        if members.size == 0:
            continue
        if members.size < 2:
            raise DatasetError(f"Class {name!r} has a single item and cannot be stratified")
        in_train[members[:floor_count(train_fraction, members.size)]] = True

    train_idx = [i for i in order if in_train[i]]
    val_idx = [i for i in order if not in_train[i]]
    return ds.subset(train_idx), ds.subset(val_idx)
