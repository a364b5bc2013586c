"""Random quantized layers and inputs shared by kernel tests."""

import numpy as np

from maiq.kernels import Activation, QLayer, conv2d_real
from maiq.tensor import (
    QuantParams,
    Tensor,
    dequantize_array,
    params_from_range,
    quantize_array,
    round_half_away,
    symmetric_channel_params,
)


def qlayer(rng, spec, cin, in_params, out_params=None, act=Activation.NONE, real_in=None):
    """Random quantized layer; out params default to the fake-quant output range."""
    kshape = (spec.kernel_h, spec.kernel_w, 1 if spec.depthwise else cin, spec.out_channels)
    w_real = rng.normal(0, 1 / np.sqrt(np.prod(kshape[:3])), kshape)
    wp = symmetric_channel_params(w_real)
    wq = quantize_array(w_real, wp)
    bscale = in_params.scale * wp.scale_array()
    b_real = rng.normal(0, 0.2, spec.out_channels)
    bq = np.clip(np.vectorize(round_half_away)(b_real / bscale), -(2**31), 2**31 - 1).astype(np.int32)
    weights = Tensor(wq, wp)
    bias = Tensor(bq.reshape(1, 1, 1, -1), QuantParams.per_channel(bscale))
    if out_params is None:
        ref = conv2d_real(real_in, dequantize_array(wq, wp), bq * bscale, spec)
        out_params = params_from_range(float(ref.min()), float(ref.max()))
    return QLayer(spec, weights, bias, in_params, out_params, act)


def random_input(rng, shape):
    p = QuantParams.per_tensor(float(rng.uniform(0.005, 0.1)), int(rng.integers(-100, 100)))
    return Tensor(rng.integers(-128, 128, shape).astype(np.int8), p)
