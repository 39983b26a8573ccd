# edgebench/tensor_core.py
"""
Dense tensor value type plus the two primitives every backend is built on:
a GEMM with a fixed per-element summation order, and im2col.

Images are stored channels-last, (h, w, c), row-major.
"""
import math
from typing import Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

# Rows of ``a`` processed per GEMM block; bounds the (rows, k, n) product buffer.
GEMM_BLOCK_ROWS = 256

KernelSize = Union[int, Tuple[int, int]]


class Tensor:
    """Immutable fp32 n-dimensional array."""

    __slots__ = ("_array",)

    def __init__(self, shape: Sequence[int], data):
        shape = tuple(int(dim) for dim in shape)
        if not shape or any(dim < 1 for dim in shape):
            raise ShapeError(f"Tensor dimensions must be positive, got {list(shape)}")

        flat = np.array(data, dtype=np.float32).ravel()
        expected = math.prod(shape)
        if flat.size != expected:
            raise ShapeError(
                f"Shape {list(shape)} needs {expected} elements but data has {flat.size}"
            )

        array = flat.reshape(shape)
        array.setflags(write=False)
        self._array = array

    @classmethod
    def from_array(cls, array: np.ndarray, copy: bool = True) -> "Tensor":
        array = np.asarray(array, dtype=np.float32)
        if copy or array.flags.writeable is False:
            return cls(array.shape, array)
        # Freshly computed arrays are adopted without a copy.
        tensor = cls.__new__(cls)
        array.setflags(write=False)
        tensor._array = array
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._array.shape

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def data(self) -> np.ndarray:
        """Flat, read-only view in row-major order."""
        return self._array.reshape(-1)

    @property
    def array(self) -> np.ndarray:
        """Read-only n-dimensional view."""
        return self._array

    def __getitem__(self, index) -> float:
        return float(self._array[index])

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return Tensor(shape, self._array)

    def tolist(self) -> list:
        return self._array.tolist()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._array, other._array))

    __hash__ = None

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)})"


def tensor_new(shape: Sequence[int], data) -> Tensor:
    return Tensor(shape, data)


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """float32 matrix product; every output element is accumulated in ascending k order."""
    rows = a.shape[0]
    out = np.empty((rows, b.shape[1]), dtype=np.float32)
    a = a.astype(np.float32, copy=False)
    b = b.astype(np.float32, copy=False)

    for start in range(0, rows, GEMM_BLOCK_ROWS):
        block = a[start:start + GEMM_BLOCK_ROWS]
        products = block[:, :, None] * b[None, :, :]
        # cumsum is a sequential accumulate along k
        out[start:start + block.shape[0]] = np.cumsum(products, axis=1, dtype=np.float32)[:, -1, :]

    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot multiply {list(a.shape)} by {list(b.shape)}")
    return Tensor.from_array(gemm(a.array, b.array), copy=False)


def _pair(value: KernelSize) -> Tuple[int, int]:
    if isinstance(value, int):
        return value, value
    kh, kw = value
    return int(kh), int(kw)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col_array(array: np.ndarray, kernel: KernelSize, stride: int = 1,
                 padding: int = 0, pad_value=0) -> np.ndarray:
    """
    Unfold an (h, w, c) array into (oh*ow, kh*kw*c) receptive-field rows.

    Works for any dtype; ``pad_value`` lets integer callers pad with their zero point.
    """
    if array.ndim != 3:
        raise ShapeError(f"im2col expects an (h, w, c) input, got shape {list(array.shape)}")
    kh, kw = _pair(kernel)
    if kh < 1 or kw < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"Invalid im2col geometry: kernel={kh}x{kw}, stride={stride}, padding={padding}")

    h, w, c = array.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"Kernel {kh}x{kw} is larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )

    if padding:
        array = np.pad(array, ((padding, padding), (padding, padding), (0, 0)),
                       mode="constant", constant_values=pad_value)

    windows = sliding_window_view(array, (kh, kw), axis=(0, 1))[::stride, ::stride]
    oh, ow = windows.shape[:2]
    # (oh, ow, c, kh, kw) -> (oh, ow, kh, kw, c)
    return np.ascontiguousarray(windows.transpose(0, 1, 3, 4, 2)).reshape(oh * ow, kh * kw * c)


def im2col(input: Tensor, kernel: KernelSize, stride: int = 1, padding: int = 0) -> Tensor:
    return Tensor.from_array(im2col_array(input.array, kernel, stride, padding), copy=False)
