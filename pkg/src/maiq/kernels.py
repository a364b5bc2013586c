"""Integer INT8 kernels and their real-valued reference counterparts.

Layouts: activations are NHWC, conv weights HWIO (``kh, kw, in, out``),
depthwise weights ``kh, kw, 1, C`` and fully-connected weights
``1, 1, in, out``. Per-channel weight scales index the last axis.

Convolutions accumulate ``(q_in - zp_in) * q_w`` exactly. The GEMM itself is
dispatched to BLAS on integer-valued float64 operands when the worst-case
accumulator magnitude is below 2**53, which keeps every partial sum exact;
otherwise it falls back to int64 matmul.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from maiq.errors import NonFinite, ShapeMismatch
from maiq.tensor import (
    QMAX,
    QMIN,
    QuantParams,
    RequantMultiplier,
    Tensor,
    apply_requant,
    compute_requant,
    multiply_by_quantized_multiplier,
    quantize,
    quantize_array,
    requant_channels,
)

HSIG_OUT_PARAMS = QuantParams.per_tensor(1.0 / 256.0, -128)
RESIDUAL_LEFT_SHIFT = 20
_EXACT_F64 = 2.0**53


class Padding(enum.Enum):
    SAME = 0
    VALID = 1


class Activation(enum.Enum):
    NONE = 0
    RELU6 = 1


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    stride: int
    padding: Padding
    depthwise: bool
    out_channels: int

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride, self.out_channels) < 1:
            raise ValueError(f"invalid conv spec {self}")

    def output_hw(self, in_h: int, in_w: int) -> tuple:
        return (
            conv_output_extent(in_h, self.kernel_h, self.stride, self.padding),
            conv_output_extent(in_w, self.kernel_w, self.stride, self.padding),
        )


@dataclass(frozen=True)
class BneckSpec:
    expansion_size: int
    stride: int
    use_se: bool
    out_channels: int
    kernel: int = 3

    def has_residual(self, in_channels: int) -> bool:
        return self.stride == 1 and in_channels == self.out_channels


def conv_output_extent(n: int, k: int, stride: int, padding: Padding) -> int:
    if padding is Padding.SAME:
        return -(-n // stride)
    if n < k:
        raise ShapeMismatch(f"VALID conv: extent {n} smaller than kernel {k}")
    return (n - k) // stride + 1


def _same_pads(n: int, k: int, stride: int) -> tuple:
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def se_reduce_width(expansion: int) -> int:
    """Squeeze width: a quarter of the expansion, rounded up to a multiple of 8."""
    return 8 * math.ceil(expansion / 4 / 8)


def activation_bounds(params: QuantParams, act: Activation) -> tuple:
    if act is Activation.RELU6:
        return quantize(0.0, params), quantize(6.0, params)
    return QMIN, QMAX


# ---------------------------------------------------------------------------
# accumulation helpers


def _pad_spatial(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    if spec.padding is Padding.VALID:
        return x
    pt, pb = _same_pads(x.shape[1], spec.kernel_h, spec.stride)
    pl, pr = _same_pads(x.shape[2], spec.kernel_w, spec.stride)
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def _int_gemm(a: np.ndarray, b: np.ndarray, amax: int, bmax: int) -> np.ndarray:
    """Exact integer product of two integer-valued matrices as int64."""
    if a.shape[1] * amax * bmax < _EXACT_F64:
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.int64)
    return a.astype(np.int64) @ b.astype(np.int64)


def conv_accumulate(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Integer accumulators of a regular conv.

    ``x`` holds zero-point-subtracted input codes (so zero padding is exact),
    ``w`` the HWIO weight codes.
    """
    b, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeMismatch(f"weights expect {wcin} input channels, input has {cin}")
    oh, ow = spec.output_hw(h, wd)
    xp = _pad_spatial(x, spec)
    s = spec.stride
    if kh == kw == 1:
        cols = xp[:, : s * (oh - 1) + 1 : s, : s * (ow - 1) + 1 : s, :].reshape(-1, cin)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :oh, :ow]
        # (b, oh, ow, cin, kh, kw) -> rows ordered like the HWIO weight flattening
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * cin)
    acc = _int_gemm(cols, w.reshape(-1, cout), 255, 128)
    return acc.reshape(b, oh, ow, cout)


def depthwise_accumulate(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    b, h, wd, c = x.shape
    kh, kw, one, wc = w.shape
    if one != 1 or wc != c:
        raise ShapeMismatch(f"depthwise weights {w.shape} do not match {c} channels")
    oh, ow = spec.output_hw(h, wd)
    xp = _pad_spatial(x, spec).astype(np.int64)
    s = spec.stride
    acc = np.zeros((b, oh, ow, c), dtype=np.int64)
    for i in range(kh):
        for j in range(kw):
            acc += xp[:, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s, :] * w[i, j, 0].astype(np.int64)
    return acc


# ---------------------------------------------------------------------------
# quantized layers


@dataclass(frozen=True, eq=False)
class QLayer:
    """Quantized weights of one conv / depthwise / FC op plus its requant state.

    ``weights`` is INT8 with per-channel symmetric params, ``bias`` INT32 with
    scale ``in_scale * weight_scale``. Multipliers are derived once here.
    """

    spec: ConvSpec
    weights: Tensor
    bias: Tensor
    in_params: QuantParams
    out_params: QuantParams
    activation: Activation = Activation.NONE
    multipliers: List[RequantMultiplier] = field(init=False)
    _packed: tuple = field(init=False, repr=False)

    def __post_init__(self):
        ws = self.weights.qparams.scales
        if len(ws) != self.spec.out_channels or self.bias.shape[-1] != self.spec.out_channels:
            raise ShapeMismatch("weight/bias channel count differs from out_channels")
        s_in, s_out = self.in_params.scale, self.out_params.scale
        mults = [compute_requant(s_in * s / s_out) for s in ws]
        object.__setattr__(self, "multipliers", mults)
        packed = (
            np.array([m.mantissa for m in mults], dtype=np.int64),
            np.array([m.shift for m in mults], dtype=np.int64),
        )
        object.__setattr__(self, "_packed", packed)
        object.__setattr__(self, "_bias", self.bias.data.reshape(-1).astype(np.int64))
        object.__setattr__(self, "_bounds", activation_bounds(self.out_params, self.activation))


def _requant_output(acc, layer: QLayer) -> Tensor:
    acc = acc + layer._bias
    lo, hi = layer._bounds
    out = requant_channels(acc, layer._packed, layer.out_params.zero_point, lo, hi)
    return Tensor(out, layer.out_params)


def _centered(t: Tensor) -> np.ndarray:
    if t.qparams is None or t.data.dtype != np.int8:
        raise TypeError("quantized kernels take INT8 tensors")
    return t.data.astype(np.int32) - t.qparams.zero_point


def conv2d_q(x: Tensor, layer: QLayer) -> Tensor:
    """Quantized regular convolution with fused activation clamp."""
    if layer.spec.depthwise:
        return depthwise_conv_q(x, layer)
    acc = conv_accumulate(_centered(x), layer.weights.data, layer.spec)
    return _requant_output(acc, layer)


def depthwise_conv_q(x: Tensor, layer: QLayer) -> Tensor:
    acc = depthwise_accumulate(_centered(x), layer.weights.data, layer.spec)
    return _requant_output(acc, layer)


def fully_connected_q(x: Tensor, layer: QLayer) -> Tensor:
    """Dense layer over the flattened (h, w, c) features of each batch item."""
    b = x.shape[0]
    flat = _centered(x).reshape(b, -1)
    w = layer.weights.data.reshape(-1, layer.spec.out_channels)
    if flat.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"FC expects {w.shape[0]} inputs, got {flat.shape[1]}")
    acc = _int_gemm(flat, w, 255, 128).reshape(b, 1, 1, -1)
    return _requant_output(acc, layer)


def relu6_q(t: Tensor) -> Tensor:
    lo, hi = activation_bounds(t.qparams, Activation.RELU6)
    return Tensor(np.clip(t.data, lo, hi).astype(np.int8), t.qparams)


@functools.lru_cache(maxsize=256)
def hardsigmoid_table(scale: float, zero_point: int) -> np.ndarray:
    """256-entry code->code table, indexed by ``q + 128``."""
    codes = np.arange(QMIN, QMAX + 1)
    x = (codes - zero_point) * scale
    y = np.clip(x + 3.0, 0.0, 6.0) / 6.0
    table = quantize_array(y, HSIG_OUT_PARAMS)
    table.flags.writeable = False
    return table


def hardsigmoid_q(t: Tensor) -> Tensor:
    table = hardsigmoid_table(t.qparams.scale, t.qparams.zero_point)
    return Tensor(table[t.data.astype(np.int64) + 128], HSIG_OUT_PARAMS)


def _div_round_half_away(num: np.ndarray, den: int) -> np.ndarray:
    num = np.asarray(num, dtype=np.int64)
    mag = (2 * np.abs(num) + den) // (2 * den)
    return np.sign(num) * mag


def global_avgpool_q(t: Tensor) -> Tensor:
    b, h, w, c = t.shape
    if h < 1 or w < 1:
        raise ShapeMismatch("global pooling needs non-empty spatial extents")
    total = _centered(t).astype(np.int64).sum(axis=(1, 2), keepdims=True)
    out = _div_round_half_away(total, h * w) + t.qparams.zero_point
    return Tensor(np.clip(out, QMIN, QMAX).astype(np.int8), t.qparams)


def avgpool_q(t: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` average pooling (VALID)."""
    b, h, w, c = t.shape
    oh, ow = h // size, w // size
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"cannot pool {h}x{w} by {size}")
    x = _centered(t)[:, : oh * size, : ow * size, :].astype(np.int64)
    total = x.reshape(b, oh, size, ow, size, c).sum(axis=(2, 4))
    out = _div_round_half_away(total, size * size) + t.qparams.zero_point
    return Tensor(np.clip(out, QMIN, QMAX).astype(np.int8), t.qparams)


def channel_gate_q(t: Tensor, gate: Tensor) -> Tensor:
    """Multiply each channel of ``t`` by a [0, 1) gate at HardSigmoid params.

    The output keeps ``t``'s params; the multiplier is then exactly 1/256.
    """
    if gate.shape[-1] != t.shape[-1] or gate.shape[0] != t.shape[0]:
        raise ShapeMismatch(f"gate {gate.shape} does not match {t.shape}")
    g = gate.data.astype(np.int64) - gate.qparams.zero_point
    acc = _centered(t).astype(np.int64) * g
    rm = compute_requant(gate.qparams.scale)
    return Tensor(apply_requant(acc, rm, t.qparams.zero_point).reshape(t.shape), t.qparams)


def se_block_q(t: Tensor, reduce: QLayer, expand: QLayer) -> Tensor:
    """Squeeze-and-excite: pool, FC+ReLU6, FC, HardSigmoid, channel multiply."""
    if expand.spec.out_channels != t.shape[-1]:
        raise ShapeMismatch("SE expand width must equal the gated channel count")
    pooled = global_avgpool_q(t)
    squeezed = fully_connected_q(pooled, reduce)
    gate = hardsigmoid_q(fully_connected_q(squeezed, expand))
    return channel_gate_q(t, gate)


@dataclass(frozen=True)
class ResidualMultipliers:
    a: RequantMultiplier
    b: RequantMultiplier
    out: RequantMultiplier


def residual_multipliers(pa: QuantParams, pb: QuantParams, po: QuantParams) -> ResidualMultipliers:
    twice_max = 2.0 * max(pa.scale, pb.scale)
    return ResidualMultipliers(
        compute_requant(pa.scale / twice_max),
        compute_requant(pb.scale / twice_max),
        compute_requant(twice_max / ((1 << RESIDUAL_LEFT_SHIFT) * po.scale)),
    )


def residual_add_q(a: Tensor, b: Tensor, out_params: QuantParams,
                   mults: Optional[ResidualMultipliers] = None) -> Tensor:
    """Saturating quantized elementwise add.

    Both operands are left-shifted by 20 bits, brought to a common scale of
    ``2 * max(scale_a, scale_b)``, summed, then requantized to ``out_params``.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"residual operands differ: {a.shape} vs {b.shape}")
    if mults is None:
        mults = residual_multipliers(a.qparams, b.qparams, out_params)
    xa = _centered(a).astype(np.int64) << RESIDUAL_LEFT_SHIFT
    xb = _centered(b).astype(np.int64) << RESIDUAL_LEFT_SHIFT
    sa = multiply_by_quantized_multiplier(xa, mults.a.mantissa, mults.a.shift)
    sb = multiply_by_quantized_multiplier(xb, mults.b.mantissa, mults.b.shift)
    out = apply_requant(sa + sb, mults.out, out_params.zero_point)
    return Tensor(np.asarray(out, dtype=np.int8).reshape(a.shape), out_params)


@dataclass(frozen=True, eq=False)
class QBneck:
    spec: BneckSpec
    expand: QLayer
    depthwise: QLayer
    project: QLayer
    se_reduce: Optional[QLayer] = None
    se_expand: Optional[QLayer] = None
    out_params: Optional[QuantParams] = None  # residual sum params
    residual: Optional[ResidualMultipliers] = None


def bneck_q(t: Tensor, block: QBneck) -> Tensor:
    """Inverted residual: expand 1x1, depthwise kxk, optional SE, project 1x1, add."""
    h = conv2d_q(t, block.expand)
    h = depthwise_conv_q(h, block.depthwise)
    if block.spec.use_se:
        h = se_block_q(h, block.se_reduce, block.se_expand)
    h = conv2d_q(h, block.project)
    if block.spec.has_residual(t.shape[-1]):
        h = residual_add_q(h, t, block.out_params, block.residual)
    return h


# ---------------------------------------------------------------------------
# real-valued reference kernels (float64 arrays)


def relu6(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 6.0)


def hardsigmoid(x: np.ndarray) -> np.ndarray:
    return np.clip(x + 3.0, 0.0, 6.0) / 6.0


def _act(x: np.ndarray, act: Activation) -> np.ndarray:
    return relu6(x) if act is Activation.RELU6 else x


def conv2d_real(x, w, bias, spec: ConvSpec, act: Activation = Activation.NONE) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b, h, wd, cin = x.shape
    kh, kw = w.shape[:2]
    oh, ow = spec.output_hw(h, wd)
    xp = _pad_spatial(x, spec)
    s = spec.stride
    if spec.depthwise:
        out = np.zeros((b, oh, ow, cin))
        for i in range(kh):
            for j in range(kw):
                out += xp[:, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s, :] * w[i, j, 0]
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :oh, :ow]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * cin)
        out = (cols @ w.reshape(-1, w.shape[-1])).reshape(b, oh, ow, -1)
    return _act(out + np.asarray(bias, dtype=np.float64), act)


def fully_connected_real(x, w, bias, act: Activation = Activation.NONE) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    out = x.reshape(x.shape[0], -1) @ w.reshape(-1, w.shape[-1]) + bias
    return _act(out.reshape(x.shape[0], 1, 1, -1), act)


def global_avgpool_real(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).mean(axis=(1, 2), keepdims=True)


def avgpool_real(x, size: int = 2) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    b, h, w, c = x.shape
    oh, ow = h // size, w // size
    return x[:, : oh * size, : ow * size].reshape(b, oh, size, ow, size, c).mean(axis=(2, 4))


def se_block_real(x, reduce_w, reduce_b, expand_w, expand_b) -> np.ndarray:
    pooled = global_avgpool_real(x)
    s = fully_connected_real(pooled, reduce_w, reduce_b, Activation.RELU6)
    gate = hardsigmoid(fully_connected_real(s, expand_w, expand_b))
    return np.asarray(x, dtype=np.float64) * gate


# ---------------------------------------------------------------------------
# preprocessing and head


def _interp_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centres (edge-clamped)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be positive")
    x = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
    _, h, w, _ = x.shape
    if (h, w) == (out_h, out_w):
        return Tensor.real(x)
    y0, y1, fy = _interp_axis(h, out_h)
    x0, x1, fx = _interp_axis(w, out_w)
    fy = fy[None, :, None, None]
    fx = fx[None, None, :, None]
    # lerp as a + (b - a) * t keeps constant images exactly constant
    rows = x[:, y0] + (x[:, y1] - x[:, y0]) * fy
    out = rows[:, :, x0] + (rows[:, :, x1] - rows[:, :, x0]) * fx
    return Tensor.real(out)


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFinite("softmax input contains non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
