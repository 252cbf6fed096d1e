"""Reference int8 deployment kernels with shift-based requantization.

Kernels replicate CMSIS-NN q7 semantics on the host: int8 operands, int32
accumulation, bias pre-shifted into the accumulator format, and output
requantization by an add-half arithmetic right shift followed by
saturation. Activations are laid out HWC (optionally with a leading batch
axis); convolution weights are [out, in, kh, kw].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import gemm
from .errors import FormatError, InvalidInputError, PlanError
from .quant import (
    MAX_FRAC_BITS,
    MIN_FRAC_BITS,
    AsymmetricQParams,
    QFormat,
    QTensor,
    quantize_asymmetric,
)

ACC_EXACT_LIMIT = 1 << 24
INT32_MAX = (1 << 31) - 1


def round_shift(acc, s: int):
    """``floor(acc / 2**s + 0.5)`` via add-half then arithmetic shift."""
    if not 0 <= s <= 31:
        raise InvalidInputError(f"shift {s} outside [0, 31]")
    if s == 0:
        return acc
    if isinstance(acc, (int, np.integer)):
        return (int(acc) + (1 << (s - 1))) >> s
    acc = np.asarray(acc, dtype=np.int64)
    return (acc + (1 << (s - 1))) >> s


def sat8(v) -> np.ndarray:
    return np.clip(v, -128, 127).astype(np.int8)


def derive_shifts(frac_in: int, frac_wt: int, frac_bias: int, frac_out: int) -> tuple[int, int]:
    product = frac_in + frac_wt
    bias_shift, out_shift = product - frac_bias, product - frac_out
    if bias_shift < 0 or out_shift < 0:
        raise FormatError(
            "unrepresentable format combination: "
            f"bias_shift={bias_shift}, out_shift={out_shift} "
            f"(frac_in={frac_in}, frac_wt={frac_wt}, frac_bias={frac_bias}, frac_out={frac_out})"
        )
    return bias_shift, out_shift


def accumulator_bound(fan_in: int, bias_shift: int, bias_code: int = 128) -> int:
    """Worst-case accumulator magnitude for a layer."""
    return 127 * 127 * fan_in + abs(bias_code) * (1 << bias_shift)


def max_bias_shift(fan_in: int) -> int:
    """Largest bias_shift that keeps the worst-case accumulator below 2**24."""
    room = ACC_EXACT_LIMIT - 1 - 127 * 127 * fan_in
    if room < 128:
        raise PlanError(
            f"fan-in {fan_in} exceeds the 2^24 accumulator gate even without bias"
        )
    return min(int(room // 128).bit_length() - 1, 31)


def resolve_bias_frac(wanted: int, frac_in: int, frac_wt: int, fan_in: int,
                      gate: bool = True) -> int:
    """Clamp an automatically chosen bias format into the range the kernel accepts.

    The bias must not be finer than the accumulator format (bias_shift >= 0)
    and, with the gate on, not so coarse that the shifted bias could push the
    accumulator past 2**24.
    """
    product = frac_in + frac_wt
    lo = product - (max_bias_shift(fan_in) if gate else 31)
    frac = min(max(wanted, lo), product)
    return min(max(frac, MIN_FRAC_BITS), MAX_FRAC_BITS)


def resolve_out_frac(wanted: int, frac_in: int, frac_wt: int) -> int:
    product = frac_in + frac_wt
    frac = min(max(wanted, product - 31), product)
    return min(max(frac, MIN_FRAC_BITS), MAX_FRAC_BITS)


@dataclass
class ConvParams:
    weights: QTensor  # [out_channels, in_channels, kernel_h, kernel_w]
    bias: QTensor  # [out_channels]
    bias_shift: int
    out_shift: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.data.ndim != 4:
            raise InvalidInputError("conv weights must be [out, in, kh, kw]")
        if self.bias.shape != (self.out_channels,):
            raise InvalidInputError(
                f"bias length {self.bias.shape} does not match out_channels {self.out_channels}"
            )
        if self.bias_shift < 0 or self.out_shift < 0:
            raise FormatError("bias_shift and out_shift must be non-negative")
        if self.stride < 1 or self.padding < 0:
            raise InvalidInputError("stride must be >= 1 and padding >= 0")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[3]

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        return oh, ow


@dataclass
class FCParams:
    weights: QTensor  # [out_features, in_features]
    bias: QTensor
    bias_shift: int
    out_shift: int

    def __post_init__(self):
        if self.weights.data.ndim != 2:
            raise InvalidInputError("fully-connected weights must be [out, in]")
        if self.bias.shape != (self.weights.shape[0],):
            raise InvalidInputError("bias length does not match out_features")
        if self.bias_shift < 0 or self.out_shift < 0:
            raise FormatError("bias_shift and out_shift must be non-negative")

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]


@dataclass
class PreprocParams:
    """Integer mean and power-of-2 scale: out = sat8(pixel - mu) at frac_bits = sigma_shift."""

    mu: np.ndarray  # per channel [C], or per pixel [H, W, C]
    sigma_shift: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.int64)
        if self.mu.size and (self.mu.min() < 0 or self.mu.max() > 255):
            raise InvalidInputError("preprocessing mean must lie in [0, 255]")
        if not 0 <= self.sigma_shift <= 7:
            raise InvalidInputError("sigma_shift must lie in [0, 7]")

    @property
    def output_format(self) -> QFormat:
        return QFormat(8, self.sigma_shift)


@dataclass
class AccumulatorBuffer:
    data: np.ndarray  # int32 values held as int64

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        if self.data.size and np.abs(self.data).max() > INT32_MAX:
            raise InvalidInputError("accumulator value does not fit in int32")

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass
class DynamicRequantResult:
    data: np.ndarray  # uint8
    params: AsymmetricQParams
    staging_bytes: int
    output_bytes: int

    @property
    def memory_ratio(self) -> float:
        return self.staging_bytes / self.output_bytes


def _check_format(frac: int, what: str) -> QFormat:
    try:
        return QFormat(8, frac)
    except InvalidInputError as exc:
        raise FormatError(f"{what} format out of range: {exc}") from exc


def _int_matmul(cols: np.ndarray, w: np.ndarray) -> np.ndarray:
    # int32 products are exact while fan_in * 2**14 stays below 2**31
    dtype = np.int32 if cols.shape[-1] < (1 << 16) else np.int64
    return cols.astype(dtype) @ w.astype(dtype).T


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """[N, H, W, C] -> [N, OH, OW, C*kh*kw] patches (zero padding), channel-major."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    n, oh, ow = win.shape[:3]
    return win.reshape(n, oh, ow, -1)


def _batched(data: np.ndarray, item_ndim: int) -> tuple[np.ndarray, bool]:
    if data.ndim == item_ndim:
        return data[None], True
    if data.ndim == item_ndim + 1:
        return data, False
    raise InvalidInputError(f"expected a {item_ndim}-D tensor or a batch of them, got {data.shape}")


def conv2d_acc(x: QTensor, p: ConvParams) -> AccumulatorBuffer:
    """Int32 accumulators before requantization."""
    data, squeeze = _batched(x.data, 3)
    if data.shape[-1] != p.in_channels:
        raise InvalidInputError(
            f"input has {data.shape[-1]} channels, weights expect {p.in_channels}"
        )
    h, w = data.shape[1:3]
    if h + 2 * p.padding < p.kernel_h or w + 2 * p.padding < p.kernel_w:
        raise InvalidInputError("kernel larger than padded input")
    if x.format.frac_bits + p.weights.format.frac_bits - p.bias.format.frac_bits != p.bias_shift:
        raise InvalidInputError("input format does not match the frac_in used for bias_shift")
    cols = im2col(data, p.kernel_h, p.kernel_w, p.stride, p.padding)
    acc = _int_matmul(cols, p.weights.data.reshape(p.out_channels, -1)).astype(np.int64)
    acc += p.bias.data.astype(np.int64) << p.bias_shift
    return AccumulatorBuffer(acc[0] if squeeze else acc)


def conv2d_q7(x: QTensor, p: ConvParams) -> QTensor:
    acc = conv2d_acc(x, p)
    fmt = _check_format(x.format.frac_bits + p.weights.format.frac_bits - p.out_shift, "conv output")
    shifted = round_shift(acc.data, p.out_shift)
    out = sat8(shifted)
    return QTensor(out, fmt, int(np.count_nonzero(out != shifted)))


def fully_connected_acc(x: QTensor, p: FCParams) -> AccumulatorBuffer:
    data, squeeze = _batched(x.data, 1)
    if data.shape[-1] != p.fan_in:
        raise InvalidInputError(f"input length {data.shape[-1]} does not match fan-in {p.fan_in}")
    if x.format.frac_bits + p.weights.format.frac_bits - p.bias.format.frac_bits != p.bias_shift:
        raise InvalidInputError("input format does not match the frac_in used for bias_shift")
    acc = _int_matmul(data, p.weights.data).astype(np.int64)
    acc += p.bias.data.astype(np.int64) << p.bias_shift
    return AccumulatorBuffer(acc[0] if squeeze else acc)


def fully_connected_q7(x: QTensor, p: FCParams) -> QTensor:
    acc = fully_connected_acc(x, p)
    fmt = _check_format(x.format.frac_bits + p.weights.format.frac_bits - p.out_shift, "fc output")
    shifted = round_shift(acc.data, p.out_shift)
    out = sat8(shifted)
    return QTensor(out, fmt, int(np.count_nonzero(out != shifted)))


def relu_q7(x: QTensor) -> QTensor:
    return QTensor(np.maximum(x.data, 0), x.format)


def maxpool_q7(x: QTensor, window: int, stride: int) -> QTensor:
    if window < 1 or stride < 1:
        raise InvalidInputError("pool window and stride must be positive")
    data, squeeze = _batched(x.data, 3)
    if window > data.shape[1] or window > data.shape[2]:
        raise InvalidInputError(f"pool window {window} larger than input {data.shape[1:3]}")
    win = sliding_window_view(data, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    out = win.max(axis=(-2, -1))
    return QTensor(out[0] if squeeze else out, x.format)


def preprocess_q7(image, p: PreprocParams) -> QTensor:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise InvalidInputError("preprocess_q7 expects uint8 pixels")
    mu = p.mu
    if mu.ndim == 1 and image.shape[-1] != mu.shape[0]:
        raise InvalidInputError(f"mu has {mu.shape[0]} channels, image has {image.shape[-1]}")
    if mu.ndim == 3 and image.shape[-3:] != mu.shape:
        raise InvalidInputError("per-pixel mean shape does not match image")
    diff = image.astype(np.int64) - mu
    out = sat8(diff)
    return QTensor(out, p.output_format, int(np.count_nonzero(out != diff)))


def matmul_sym(a, b) -> np.ndarray:
    """Plain int8 x int8 -> int32 product; no offset handling."""
    a = np.ascontiguousarray(a, dtype=np.int8)
    b = np.ascontiguousarray(b, dtype=np.int8)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), np.int32)
    gemm.gemm_s8(a, b, out)
    return out


def matmul_asym(a, b, a_zero: int, b_zero: int) -> np.ndarray:
    """sum_k (A[i,k]-a_zero)(B[k,j]-b_zero) as integer core plus offset corrections."""
    a, b = _as_u8(a, "A"), _as_u8(b, "B")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"cannot multiply {a.shape} by {b.shape}")
    if not (0 <= a_zero <= 255 and 0 <= b_zero <= 255):
        raise InvalidInputError("zero points must lie in [0, 255]")
    out = np.empty((a.shape[0], b.shape[1]), np.int32)
    gemm.gemm_u8_offset(a, b, a_zero, b_zero, out)
    return out


def _as_u8(m, name: str) -> np.ndarray:
    m = np.asarray(m)
    # uint8 arrays are in range by construction; only wider inputs need the scan
    if m.dtype != np.uint8:
        if m.size and (m.min() < 0 or m.max() > 255):
            raise InvalidInputError(f"{name} must hold uint8 values")
        m = m.astype(np.uint8)
    return np.ascontiguousarray(m)


def matmul_requant_shift(a, b, shift: int) -> np.ndarray:
    """int8 GEMM requantized to int8 element by element as it is produced."""
    if not 0 <= shift <= 31:
        raise InvalidInputError(f"shift {shift} outside [0, 31]")
    a = np.ascontiguousarray(a, dtype=np.int8)
    b = np.ascontiguousarray(b, dtype=np.int8)
    if a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), np.int8)
    gemm.gemm_s8_requant_shift(a, b, np.int32(shift), out)
    return out


def requantize_dynamic(acc) -> DynamicRequantResult:
    """Input-dependent requantization: scan the staged int32 outputs, then quantize."""
    if not isinstance(acc, AccumulatorBuffer):
        acc = AccumulatorBuffer(acc)
    data = acc.data
    if data.size == 0:
        raise InvalidInputError("cannot requantize an empty accumulator buffer")
    lo, hi = int(data.min()), int(data.max())
    if lo == hi:
        # constant buffer: keep the constant exactly representable
        if abs(lo) <= 255:
            params = AsymmetricQParams(1.0, max(0, -lo))
        else:
            params = AsymmetricQParams(float(abs(lo)), 1 if lo < 0 else 0)
    else:
        lo, hi = min(lo, 0), max(hi, 0)
        scale = (hi - lo) / 255.0
        params = AsymmetricQParams(scale, int(np.clip(np.floor(-lo / scale + 0.5), 0, 255)))
    q = quantize_asymmetric(data, params)
    return DynamicRequantResult(q, params, staging_bytes=4 * data.size, output_bytes=q.nbytes)
