"""Independent reference implementations used as test oracles.

Everything here runs on plain Python ints / Fractions with explicit loops and
shares no code with the vectorized kernels under test.
"""

from fractions import Fraction

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


def srdhm(a: int, b: int) -> int:
    if a == b == INT32_MIN:
        return INT32_MAX
    ab = a * b
    nudge = (1 << 30) if ab >= 0 else 1 - (1 << 30)
    x = ab + nudge
    q = abs(x) // (1 << 31)
    return q if x >= 0 else -q


def rdbpot(x: int, exponent: int) -> int:
    mask = (1 << exponent) - 1
    remainder = x & mask
    threshold = (mask >> 1) + (1 if x < 0 else 0)
    return (x >> exponent) + (1 if remainder > threshold else 0)


def requant(acc: int, mantissa: int, shift: int, zp: int, lo=-128, hi=127) -> int:
    acc = max(INT32_MIN, min(INT32_MAX, acc))
    v = rdbpot(srdhm(acc, mantissa), shift) + zp
    return max(lo, min(hi, v))


def round_half_away(fr: Fraction) -> int:
    sign = -1 if fr < 0 else 1
    a = abs(fr)
    f = a.numerator // a.denominator
    if a - f >= Fraction(1, 2):
        f += 1
    return sign * f


def same_pads(n, k, s):
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2


def conv_loops(x, zp_in, w, bias, stride, same, depthwise, mults, zp_out, lo=-128, hi=127):
    """Direct convolution over nested lists/arrays, python-int arithmetic.

    x: (b, h, w, cin) codes; w: HWIO (or kh, kw, 1, C for depthwise).
    Padding contributes real zero, i.e. (zp_in - zp_in) = 0.
    """
    B, H, W, C = (int(v) for v in x.shape)
    KH, KW, _, CO = (int(v) for v in w.shape)
    if same:
        OH, pt = same_pads(H, KH, stride)
        OW, pl = same_pads(W, KW, stride)
    else:
        OH, OW, pt, pl = (H - KH) // stride + 1, (W - KW) // stride + 1, 0, 0
    out = [[[[0] * CO for _ in range(OW)] for _ in range(OH)] for _ in range(B)]
    for b in range(B):
        for oy in range(OH):
            for ox in range(OW):
                for co in range(CO):
                    acc = int(bias[co])
                    for ky in range(KH):
                        for kx in range(KW):
                            iy, ix = oy * stride + ky - pt, ox * stride + kx - pl
                            if not (0 <= iy < H and 0 <= ix < W):
                                continue
                            if depthwise:
                                acc += (int(x[b, iy, ix, co]) - zp_in) * int(w[ky, kx, 0, co])
                            else:
                                for ci in range(C):
                                    acc += (int(x[b, iy, ix, ci]) - zp_in) * int(w[ky, kx, ci, co])
                    m = mults[co]
                    out[b][oy][ox][co] = requant(acc, m.mantissa, m.shift, zp_out, lo, hi)
    return out


def fc_loops(x, zp_in, w, bias, mults, zp_out, lo=-128, hi=127):
    B = int(x.shape[0])
    flat = [[int(v) for v in x[b].reshape(-1)] for b in range(B)]
    wm = w.reshape(-1, w.shape[-1])
    out = []
    for b in range(B):
        row = []
        for o in range(wm.shape[1]):
            acc = int(bias[o]) + sum((flat[b][i] - zp_in) * int(wm[i, o]) for i in range(wm.shape[0]))
            row.append(requant(acc, mults[o].mantissa, mults[o].shift, zp_out, lo, hi))
        out.append(row)
    return out


def mean_code(values, zp):
    """Exact mean of (q - zp), rounded half away from zero, plus zp."""
    fr = Fraction(sum(int(v) - zp for v in values), len(values))
    return max(-128, min(127, round_half_away(fr) + zp))


def residual_loops(a, zp_a, b, zp_b, mults, left_shift, zp_out):
    """Elementwise quantized add: shift, rescale both inputs, sum, requantize."""
    ma, mb, mo = mults
    out = []
    for qa, qb in zip(a, b):
        xa = rdbpot(srdhm((int(qa) - zp_a) << left_shift, ma.mantissa), ma.shift)
        xb = rdbpot(srdhm((int(qb) - zp_b) << left_shift, mb.mantissa), mb.shift)
        out.append(requant(xa + xb, mo.mantissa, mo.shift, zp_out))
    return out
