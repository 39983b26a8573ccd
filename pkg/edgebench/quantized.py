# edgebench/quantized.py
"""
Integer kernels for int8 inference: affine (de)quantization, requantization
and the int8 x int8 -> int32 Conv2D / Dense kernels.

All rounding is round-half-to-even (np.rint).
"""
from dataclasses import dataclass

import numpy as np

from .errors import QuantizationError, ShapeError
from .nn_engine import Backend
from .tensor_core import im2col_array

INT8_MIN = -128
INT8_MAX = 127
WEIGHT_QMAX = 127
INT32_MIN = -(2 ** 31)
INT32_MAX = 2 ** 31 - 1


def as_f32(value: float) -> float:
    """Round a scale to the nearest float32 so in-memory and on-disk values agree bit for bit."""
    return float(np.float32(value))


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        scale = as_f32(self.scale)
        if not np.isfinite(scale) or scale <= 0:
            raise QuantizationError(f"Quantization scale must be positive and finite, got {self.scale}")
        if not INT8_MIN <= int(self.zero_point) <= INT8_MAX:
            raise QuantizationError(f"Zero point {self.zero_point} outside int8 range")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", int(self.zero_point))


def quantize_array(x: np.ndarray, params: QuantParams) -> np.ndarray:
    q = np.rint(np.asarray(x, dtype=np.float64) / params.scale) + params.zero_point
    return np.clip(q, INT8_MIN, INT8_MAX).astype(np.int8)


def dequantize(q: np.ndarray, scale: float, zero_point: int = 0) -> np.ndarray:
    return (np.float32(scale) * (np.asarray(q, dtype=np.float32) - np.float32(zero_point))).astype(np.float32)


def requantize(acc: np.ndarray, multiplier: float, zero_point: int) -> np.ndarray:
    """int32 accumulator -> int8 on the output edge: clamp(rint(acc * multiplier) + zero_point)."""
    q = np.rint(np.asarray(acc, dtype=np.float64) * multiplier) + zero_point
    return np.clip(q, INT8_MIN, INT8_MAX).astype(np.int8)


def rescale(q: np.ndarray, src: QuantParams, dst: QuantParams) -> np.ndarray:
    """Move int8 values from one edge's parameters to another's."""
    if src == dst:
        return q
    return requantize(q.astype(np.int32) - src.zero_point, src.scale / dst.scale, dst.zero_point)


def int_relu(q: np.ndarray, zero_point: int) -> np.ndarray:
    return np.maximum(q, np.int8(zero_point))


def int_conv2d(q: np.ndarray, input_zero_point: int, weights: np.ndarray, bias: np.ndarray,
               stride: int, padding: int, multiplier: float, output_zero_point: int,
               backend: Backend) -> np.ndarray:
    if q.ndim != 3 or weights.ndim != 4 or q.shape[2] != weights.shape[2]:
        raise ShapeError(f"int8 Conv2D shape mismatch: input {list(q.shape)}, weights {list(weights.shape)}")
    kh, kw, in_c, out_c = weights.shape
    w32 = weights.astype(np.int32)

    if backend is Backend.ACCELERATED:
        cols = im2col_array(q, (kh, kw), stride, padding, pad_value=input_zero_point).astype(np.int32)
        acc = (cols - input_zero_point) @ w32.reshape(kh * kw * in_c, out_c) + bias
        oh = (q.shape[0] + 2 * padding - kh) // stride + 1
        ow = (q.shape[1] + 2 * padding - kw) // stride + 1
        return requantize(acc, multiplier, output_zero_point).reshape(oh, ow, out_c)

    x = q.astype(np.int32) - input_zero_point
    if padding:
        # padding with the zero point is padding with 0 after the shift
        x = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    oh = (x.shape[0] - kh) // stride + 1
    ow = (x.shape[1] - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"Kernel {kh}x{kw} is larger than padded input")

    acc = np.empty((oh, ow, out_c), dtype=np.int64)
    for oy in range(oh):
        for ox in range(ow):
            total = bias.astype(np.int64)
            for ky in range(kh):
                for kx in range(kw):
                    pixel = x[oy * stride + ky, ox * stride + kx]
                    for c in range(in_c):
                        total = total + int(pixel[c]) * w32[ky, kx, c]
            acc[oy, ox] = total
    return requantize(acc, multiplier, output_zero_point)


def int_dense(q: np.ndarray, input_zero_point: int, weights: np.ndarray, bias: np.ndarray,
              multiplier: float, output_zero_point: int, backend: Backend) -> np.ndarray:
    if q.ndim != 1 or weights.shape[0] != q.shape[0]:
        raise ShapeError(f"int8 Dense shape mismatch: input {list(q.shape)}, weights {list(weights.shape)}")
    x = q.astype(np.int32) - input_zero_point
    w32 = weights.astype(np.int32)

    if backend is Backend.ACCELERATED:
        acc = x @ w32 + bias
    else:
        acc = np.empty(weights.shape[1], dtype=np.int64)
        for unit in range(weights.shape[1]):
            acc[unit] = int(np.dot(x, w32[:, unit])) + int(bias[unit])
    return requantize(acc, multiplier, output_zero_point)
