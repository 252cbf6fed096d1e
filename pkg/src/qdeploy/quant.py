"""Fixed-point formats and the quantize / dequantize / fake-quant primitives.

Everything here is shared bit-for-bit by the int8 engine and the trainable
model. Rounding is round-half-up toward +inf, i.e. ``floor(v + 0.5)``, which is
exactly what an add-half-then-arithmetic-shift requantization computes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidInputError

SUPPORTED_BITS = (8, 16, 32)
MIN_FRAC_BITS = -8
MAX_FRAC_BITS = 31
DEFAULT_DECAY = 0.99

_INT_DTYPES = {8: np.int8, 16: np.int16, 32: np.int32}


@dataclass(frozen=True)
class QFormat:
    """Symmetric power-of-2 format: real value = code * 2**-frac_bits."""

    bits: int = 8
    frac_bits: int = 7

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise InvalidInputError(f"unsupported bit width {self.bits}")
        if not MIN_FRAC_BITS <= self.frac_bits <= MAX_FRAC_BITS:
            raise InvalidInputError(
                f"frac_bits {self.frac_bits} outside [{MIN_FRAC_BITS}, {MAX_FRAC_BITS}]"
            )

    @property
    def step(self) -> float:
        return math.ldexp(1.0, -self.frac_bits)

    @property
    def min_int(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def max_int(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def min_fp(self) -> float:
        return self.min_int * self.step

    @property
    def max_fp(self) -> float:
        return self.max_int * self.step

    @property
    def dtype(self):
        return _INT_DTYPES[self.bits]


@dataclass
class QTensor:
    """Integer codes plus the format that gives them meaning.

    ``saturated`` counts how many elements were clamped when the tensor was
    produced; it is diagnostic only.
    """

    data: np.ndarray
    format: QFormat
    saturated: int = 0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.size and (data.min() < self.format.min_int or data.max() > self.format.max_int):
            raise InvalidInputError("QTensor codes outside the format's integer range")
        self.data = data.astype(self.format.dtype, copy=False)

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True)
class AsymmetricQParams:
    """Unsigned 8-bit affine parameters: real = (q - zero_point) * scale."""

    scale: float
    zero_point: int = 0
    bits: int = 8

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise InvalidInputError(f"asymmetric scale must be finite and > 0, got {self.scale}")
        if not 0 <= self.zero_point <= 255:
            raise InvalidInputError(f"zero_point {self.zero_point} outside [0, 255]")
        if self.bits != 8:
            raise InvalidInputError("asymmetric quantization is 8-bit unsigned only")


@dataclass(frozen=True)
class RangeTracker:
    """EMA of observed max-abs values."""

    max_abs_ema: float = 0.0
    decay: float = DEFAULT_DECAY
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise InvalidInputError(f"decay must lie in (0, 1), got {self.decay}")


@dataclass(frozen=True)
class MinMaxTracker:
    """EMA of signed min and max, used by the asymmetric training scheme."""

    min_ema: float = 0.0
    max_ema: float = 0.0
    decay: float = DEFAULT_DECAY
    initialized: bool = False


def _ceil_log2(value: float) -> int:
    # exact for powers of two, unlike math.ceil(math.log2(v))
    mantissa, exponent = math.frexp(value)
    return exponent - 1 if mantissa == 0.5 else exponent


def choose_qformat(max_abs: float, bits: int = 8) -> QFormat:
    """Finest power-of-2 format whose negative bound covers ``-max_abs``."""
    max_abs = float(max_abs)
    if not math.isfinite(max_abs) or max_abs < 0:
        raise InvalidInputError(f"max_abs must be finite and >= 0, got {max_abs}")
    if bits not in SUPPORTED_BITS:
        raise InvalidInputError(f"unsupported bit width {bits}")
    if max_abs == 0.0:
        return QFormat(bits, bits - 1)
    frac = (bits - 1) - _ceil_log2(max_abs)
    return QFormat(bits, int(min(max(frac, MIN_FRAC_BITS), MAX_FRAC_BITS)))


def round_half_up(v: np.ndarray) -> np.ndarray:
    """``floor(v + 0.5)`` without the rounding error of forming ``v + 0.5``."""
    low = np.floor(v)
    return low + ((v - low) >= 0.5)


def quantize_codes(x, fmt: QFormat) -> tuple[np.ndarray, int]:
    """Integer codes (as int64) and the number of saturated elements."""
    v = np.ldexp(np.asarray(x, dtype=np.float64), fmt.frac_bits)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("cannot quantize non-finite values")
    q = round_half_up(v)
    clipped = np.clip(q, fmt.min_int, fmt.max_int)
    return clipped.astype(np.int64), int(np.count_nonzero(clipped != q))


def quantize(x, fmt: QFormat) -> QTensor:
    codes, saturated = quantize_codes(x, fmt)
    return QTensor(codes, fmt, saturated)


def dequantize(q: QTensor) -> np.ndarray:
    return np.ldexp(q.data.astype(np.float64), -q.format.frac_bits)


def fake_quant(x, fmt: QFormat) -> np.ndarray:
    """Quantize then dequantize, preserving the floating dtype of ``x``."""
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    v = np.ldexp(x, fmt.frac_bits)
    q = np.clip(round_half_up(v), fmt.min_int, fmt.max_int)
    return np.ldexp(q, -fmt.frac_bits).astype(dtype, copy=False)


def ste_mask(x, fmt: QFormat) -> np.ndarray:
    """Straight-through gradient of fake_quant: 1 inside [min_fp, max_fp], else 0."""
    x = np.asarray(x)
    return ((x >= fmt.min_fp) & (x <= fmt.max_fp)).astype(
        x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    )


def update_range(t: RangeTracker, batch) -> RangeTracker:
    batch = np.asarray(batch)
    if batch.size == 0:
        raise InvalidInputError("cannot update a range tracker from an empty batch")
    m = float(np.max(np.abs(batch)))
    if not math.isfinite(m):
        raise InvalidInputError("range update saw non-finite values")
    if not t.initialized:
        return replace(t, max_abs_ema=m, initialized=True)
    return replace(t, max_abs_ema=t.decay * t.max_abs_ema + (1.0 - t.decay) * m)


def tracker_format(t: RangeTracker, bits: int = 8) -> QFormat:
    return choose_qformat(t.max_abs_ema, bits)


def update_minmax(t: MinMaxTracker, batch) -> MinMaxTracker:
    batch = np.asarray(batch)
    if batch.size == 0:
        raise InvalidInputError("cannot update a range tracker from an empty batch")
    lo, hi = float(batch.min()), float(batch.max())
    if not t.initialized:
        return replace(t, min_ema=lo, max_ema=hi, initialized=True)
    d = t.decay
    return replace(t, min_ema=d * t.min_ema + (1 - d) * lo, max_ema=d * t.max_ema + (1 - d) * hi)


def asymmetric_params(lo: float, hi: float) -> AsymmetricQParams:
    """Affine uint8 parameters covering [lo, hi] widened to include zero."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi == lo:
        return AsymmetricQParams(1.0, 0)
    scale = (hi - lo) / 255.0
    zero_point = int(np.clip(math.floor(-lo / scale + 0.5), 0, 255))
    return AsymmetricQParams(scale, zero_point)


def quantize_asymmetric(x, p: AsymmetricQParams) -> np.ndarray:
    if not p.scale > 0:
        raise InvalidInputError(f"asymmetric scale must be > 0, got {p.scale}")
    q = round_half_up(np.asarray(x, dtype=np.float64) / p.scale) + p.zero_point
    return np.clip(q, 0, 255).astype(np.uint8)


def dequantize_asymmetric(q, p: AsymmetricQParams) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) - p.zero_point) * p.scale


def fake_quant_asymmetric(x, p: AsymmetricQParams) -> np.ndarray:
    x = np.asarray(x)
    return dequantize_asymmetric(quantize_asymmetric(x, p), p).astype(x.dtype, copy=False)


def asymmetric_mask(x, p: AsymmetricQParams) -> np.ndarray:
    lo = (0 - p.zero_point) * p.scale
    hi = (255 - p.zero_point) * p.scale
    return ((x >= lo) & (x <= hi)).astype(x.dtype)
