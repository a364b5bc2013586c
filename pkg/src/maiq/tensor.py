"""Tensors and affine INT8 quantization arithmetic.

Real values map to integer codes through ``r ~= (q - zero_point) * scale``.
Activations use asymmetric per-tensor parameters; conv/FC weights use
symmetric per-output-channel parameters (zero point 0) along the last axis.
Integer layers rescale their INT32 accumulators with a fixed-point
multiplier (Q31 mantissa plus right shift) so no float math is needed at
inference time.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from maiq.errors import MultiplierOutOfRange, NonFinite, ShapeMismatch

QMIN = -128
QMAX = 127
INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


class DType(enum.Enum):
    REAL32 = "real32"
    INT8 = "int8"
    INT32 = "int32"


class Granularity(enum.Enum):
    PER_TENSOR = 0
    PER_CHANNEL = 1


_NP_TO_DTYPE = {
    np.dtype(np.float32): DType.REAL32,
    np.dtype(np.int8): DType.INT8,
    np.dtype(np.int32): DType.INT32,
}


def round_half_away(x):
    """Round to nearest integer, ties away from zero (scalar or array)."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    f = np.floor(a)
    r = np.copysign(f + (a - f >= 0.5), x)
    if np.ndim(r) == 0:
        return int(r)
    return r


@dataclass(frozen=True)
class QuantParams:
    scales: tuple
    zero_points: tuple
    granularity: Granularity = Granularity.PER_TENSOR

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        zps = tuple(int(z) for z in self.zero_points)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "zero_points", zps)
        if len(scales) == 0 or len(scales) != len(zps):
            raise ValueError("scales and zero_points must be non-empty and equally long")
        if self.granularity is Granularity.PER_TENSOR and len(scales) != 1:
            raise ValueError("per-tensor params carry exactly one scale")
        if not all(math.isfinite(s) and s > 0 for s in scales):
            raise ValueError(f"scales must be finite and positive, got {scales[:4]}...")
        if not all(QMIN <= z <= QMAX for z in zps):
            raise ValueError("zero points must lie in [-128, 127]")

    @classmethod
    def per_tensor(cls, scale: float, zero_point: int = 0) -> "QuantParams":
        return cls((scale,), (zero_point,), Granularity.PER_TENSOR)

    @classmethod
    def per_channel(cls, scales: Sequence[float], zero_points=None) -> "QuantParams":
        if zero_points is None:
            zero_points = [0] * len(scales)
        return cls(tuple(scales), tuple(zero_points), Granularity.PER_CHANNEL)

    @property
    def scale(self) -> float:
        return self.scales[0]

    @property
    def zero_point(self) -> int:
        return self.zero_points[0]

    def __len__(self):
        return len(self.scales)

    def scale_array(self) -> np.ndarray:
        return np.asarray(self.scales, dtype=np.float64)

    def zp_array(self) -> np.ndarray:
        return np.asarray(self.zero_points, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Tensor:
    """Dense 4-D (batch, height, width, channels) tensor, real or quantized.

    The buffer is exposed read-only so a tensor can be shared between
    threads without copying.
    """

    data: np.ndarray
    qparams: Optional[QuantParams] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in _NP_TO_DTYPE:
            raise TypeError(f"unsupported element type {data.dtype}")
        if data.ndim != 4:
            raise ShapeMismatch(f"tensors are 4-D (b, h, w, c), got shape {data.shape}")
        view = data.view()
        view.flags.writeable = False
        object.__setattr__(self, "data", view)
        dtype = _NP_TO_DTYPE[data.dtype]
        if (dtype is DType.REAL32) != (self.qparams is None):
            raise ValueError("qparams are required for integer tensors and only for them")
        if self.qparams is not None and self.qparams.granularity is Granularity.PER_CHANNEL:
            if len(self.qparams) != data.shape[-1]:
                raise ShapeMismatch(
                    f"{len(self.qparams)} channel scales for {data.shape[-1]} channels"
                )

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> DType:
        return _NP_TO_DTYPE[self.data.dtype]

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def dequantize(self) -> np.ndarray:
        """Real values as float64; real tensors are returned as-is (upcast)."""
        if self.qparams is None:
            return self.data.astype(np.float64)
        return dequantize_array(self.data, self.qparams)

    @classmethod
    def real(cls, data) -> "Tensor":
        return cls(np.asarray(data, dtype=np.float32))

    @classmethod
    def quantized(cls, real_data, qparams: QuantParams) -> "Tensor":
        return cls(quantize_array(np.asarray(real_data, dtype=np.float64), qparams), qparams)


def _check_channel(params: QuantParams, channel: int):
    if not 0 <= channel < len(params):
        raise IndexError(f"channel {channel} out of range for {len(params)} scales")


def quantize(r: float, params: QuantParams, channel: int = 0) -> int:
    """Saturating INT8 code of a single real value."""
    _check_channel(params, channel)
    if math.isnan(r):
        raise NonFinite("cannot quantize NaN")
    scaled = min(max(r / params.scales[channel], -1e9), 1e9)
    q = round_half_away(scaled) + params.zero_points[channel]
    return int(min(max(q, QMIN), QMAX))


def dequantize(q: int, params: QuantParams, channel: int = 0) -> float:
    _check_channel(params, channel)
    return (int(q) - params.zero_points[channel]) * params.scales[channel]


def quantize_array(x: np.ndarray, params: QuantParams) -> np.ndarray:
    """Vectorised ``quantize``; per-channel params index the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFinite("cannot quantize non-finite values")
    q = round_half_away(x / params.scale_array()) + params.zp_array()
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def dequantize_array(q: np.ndarray, params: QuantParams) -> np.ndarray:
    return (np.asarray(q, dtype=np.int64) - params.zp_array()) * params.scale_array()


def params_from_range(rmin: float, rmax: float) -> QuantParams:
    """Asymmetric per-tensor params covering ``[rmin, rmax]``.

    The range is widened to contain 0 first so that real zero (the padding
    value) has an exact code.
    """
    if not (math.isfinite(rmin) and math.isfinite(rmax)):
        raise NonFinite(f"range [{rmin}, {rmax}] is not finite")
    if rmin > rmax:
        raise ValueError(f"rmin {rmin} > rmax {rmax}")
    if rmin == rmax:
        return QuantParams.per_tensor(1.0, 0)
    rmin, rmax = min(rmin, 0.0), max(rmax, 0.0)
    scale = (rmax - rmin) / 255.0
    zp = round_half_away(-128.0 - rmin / scale)
    return QuantParams.per_tensor(scale, min(max(zp, QMIN), QMAX))


def symmetric_channel_params(w: np.ndarray) -> QuantParams:
    """Per-output-channel symmetric params for a weight array (channels last)."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise NonFinite("weights contain non-finite values")
    amax = np.abs(w.reshape(-1, w.shape[-1])).max(axis=0)
    scales = np.where(amax > 0, amax / 127.0, 1.0)
    return QuantParams.per_channel(scales.tolist())


@dataclass(frozen=True)
class CalibrationStats:
    min: float = math.inf
    max: float = -math.inf
    count: int = 0

    def params(self) -> QuantParams:
        if self.count == 0:
            raise ValueError("no observations recorded")
        return params_from_range(self.min, self.max)


def observe(stats: CalibrationStats, t) -> CalibrationStats:
    """Fold one real tensor (or array) into running min/max statistics."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if isinstance(t, Tensor) and t.dtype is not DType.REAL32:
        raise TypeError("calibration observes real tensors only")
    if np.isnan(data).any():
        raise NonFinite("NaN in observed tensor")
    if data.size == 0:
        return CalibrationStats(stats.min, stats.max, stats.count + 1)
    return CalibrationStats(
        min(stats.min, float(data.min())),
        max(stats.max, float(data.max())),
        stats.count + 1,
    )


@dataclass(frozen=True)
class RequantMultiplier:
    """Real multiplier ``mantissa / 2**31 * 2**-shift`` with mantissa in [2^30, 2^31)."""

    mantissa: int
    shift: int

    @property
    def real_value(self) -> float:
        return math.ldexp(self.mantissa, -31 - self.shift)


def compute_requant(real_multiplier: float) -> RequantMultiplier:
    m = float(real_multiplier)
    if not (0.0 < m < 1.0):
        raise MultiplierOutOfRange(f"requantization multiplier {m} outside (0, 1)")
    m0, exp = math.frexp(m)
    mantissa = round_half_away(math.ldexp(m0, 31))
    # m0 just below 1 can round up to 2**31, one past the Q31 range
    mantissa = min(mantissa, INT32_MAX)
    return RequantMultiplier(int(mantissa), -exp)


def saturating_rounding_doubling_high_mul(a, b):
    """High 32 bits of ``2*a*b`` with round-to-nearest, on int64 arrays."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    ab = a * b
    # nudge by 2^30 (or 1 - 2^30 when negative) then truncate toward zero;
    # for both signs that equals floor((ab + 2^30) / 2^31)
    ab += 1 << 30
    ab >>= 31
    overflow = (a == INT32_MIN) & (b == INT32_MIN)
    if np.any(overflow):
        ab = np.where(overflow, INT32_MAX, ab)
    return ab


def rounding_divide_by_pot(x, exponent):
    x = np.asarray(x, dtype=np.int64)
    exponent = np.asarray(exponent, dtype=np.int64)
    mask = (np.int64(1) << exponent) - 1
    remainder = x & mask
    threshold = (mask >> 1) + (x < 0)
    out = x >> exponent
    out += remainder > threshold
    return out


def multiply_by_quantized_multiplier(acc, mantissa, shift):
    """Scale INT32 accumulators by ``mantissa * 2**-shift``; no zero point, no clamp."""
    acc = np.clip(np.asarray(acc, dtype=np.int64), INT32_MIN, INT32_MAX)
    return rounding_divide_by_pot(saturating_rounding_doubling_high_mul(acc, mantissa), shift)


def apply_requant(acc: Union[int, np.ndarray], rm: RequantMultiplier, out_zp: int):
    """INT32 accumulator(s) to saturated INT8 code(s) at the output scale."""
    scaled = multiply_by_quantized_multiplier(acc, rm.mantissa, rm.shift)
    out = np.clip(scaled + out_zp, QMIN, QMAX)
    if out.ndim == 0:
        return int(out)
    return out.astype(np.int8)


def requant_channels(acc: np.ndarray, multipliers, out_zp: int,
                     lo: int = QMIN, hi: int = QMAX) -> np.ndarray:
    """Per-channel requantization of an accumulator array whose last axis is channels.

    ``multipliers`` is a sequence of ``RequantMultiplier`` or a prepared
    ``(mantissas, shifts)`` pair of int64 arrays.
    """
    if isinstance(multipliers, tuple):
        mant, shift = multipliers
    else:
        mant = np.array([m.mantissa for m in multipliers], dtype=np.int64)
        shift = np.array([m.shift for m in multipliers], dtype=np.int64)
    scaled = multiply_by_quantized_multiplier(acc, mant, shift)
    return np.clip(scaled + out_zp, lo, hi).astype(np.int8)
