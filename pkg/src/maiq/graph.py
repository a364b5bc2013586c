"""Model graphs: layer list, shape propagation, execution and post-training quantization.

A graph is a straight-line list of layers executed in order (the only
non-linear dataflow, the residual add, is internal to a bottleneck block).
The first layer is always ``RESIZE`` from the raw image to the network
input, and the last is ``SOFTMAX``, which always runs on real values.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from maiq import kernels as K
from maiq.errors import EmptyCalibrationSet, ShapeMismatch
from maiq.kernels import Activation, BneckSpec, ConvSpec, Padding, QBneck, QLayer
from maiq.tensor import (
    CalibrationStats,
    QuantParams,
    Tensor,
    observe,
    quantize_array,
    round_half_away,
    symmetric_channel_params,
)


class LayerKind(enum.IntEnum):
    CONV = 1
    BNECK = 2
    FC = 3
    GLOBAL_AVGPOOL = 4
    SOFTMAX = 5
    RESIZE = 6
    AVGPOOL = 7


class Mode(enum.IntEnum):
    REAL = 0
    QUANTIZED = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    activation: Activation = Activation.NONE
    conv: Optional[ConvSpec] = None
    bneck: Optional[BneckSpec] = None
    units: int = 0  # FC width
    pool: int = 0  # AVGPOOL window
    size: tuple = ()  # RESIZE (h, w)

    @classmethod
    def conv2d(cls, k, stride, out, act=Activation.RELU6, depthwise=False, padding=Padding.SAME):
        return cls(LayerKind.CONV, act, conv=ConvSpec(k, k, stride, padding, depthwise, out))

    @classmethod
    def block(cls, exp, se, stride, out):
        return cls(LayerKind.BNECK, Activation.NONE, bneck=BneckSpec(exp, stride, se, out))

    @classmethod
    def fc(cls, units, act=Activation.NONE):
        return cls(LayerKind.FC, act, units=units)

    def output_shape(self, shape: tuple) -> tuple:
        """(h, w, c) produced from input (h, w, c)."""
        h, w, c = shape
        kind = self.kind
        if kind is LayerKind.RESIZE:
            return (self.size[0], self.size[1], c)
        if kind is LayerKind.CONV:
            if self.conv.depthwise and self.conv.out_channels != c:
                raise ShapeMismatch("depthwise conv must keep the channel count")
            return (*self.conv.output_hw(h, w), self.conv.out_channels)
        if kind is LayerKind.BNECK:
            s = self.bneck.stride
            return (-(-h // s), -(-w // s), self.bneck.out_channels)
        if kind is LayerKind.GLOBAL_AVGPOOL:
            return (1, 1, c)
        if kind is LayerKind.AVGPOOL:
            if h < self.pool or w < self.pool:
                raise ShapeMismatch(f"cannot pool {h}x{w} by {self.pool}")
            return (h // self.pool, w // self.pool, c)
        if kind is LayerKind.FC:
            return (1, 1, self.units)
        return shape


@dataclass(frozen=True)
class InputSpec:
    height: int
    width: int
    channels: int = 3
    # x * scale + offset maps [0, 255] pixels to [-1, 1]
    norm_scale: float = 1.0 / 127.5
    norm_offset: float = -1.0

    @property
    def shape(self) -> tuple:
        return (self.height, self.width, self.channels)


def _weight_shapes(spec: LayerSpec, in_shape: tuple) -> Dict[str, tuple]:
    """Expected real weight array shapes of one layer, keyed by blob name."""
    c = in_shape[2]
    if spec.kind is LayerKind.CONV:
        cs = spec.conv
        cin = 1 if cs.depthwise else c
        return {"w": (cs.kernel_h, cs.kernel_w, cin, cs.out_channels), "b": (1, 1, 1, cs.out_channels)}
    if spec.kind is LayerKind.FC:
        n_in = in_shape[0] * in_shape[1] * c
        return {"w": (1, 1, n_in, spec.units), "b": (1, 1, 1, spec.units)}
    if spec.kind is LayerKind.BNECK:
        b = spec.bneck
        e = b.expansion_size
        shapes = {
            "expand.w": (1, 1, c, e), "expand.b": (1, 1, 1, e),
            "dw.w": (b.kernel, b.kernel, 1, e), "dw.b": (1, 1, 1, e),
        }
        if b.use_se:
            r = K.se_reduce_width(e)
            shapes.update({
                "se_reduce.w": (1, 1, e, r), "se_reduce.b": (1, 1, 1, r),
                "se_expand.w": (1, 1, r, e), "se_expand.b": (1, 1, 1, e),
            })
        shapes.update({"project.w": (1, 1, e, b.out_channels), "project.b": (1, 1, 1, b.out_channels)})
        return shapes
    return {}


def bneck_sub_specs(b: BneckSpec):
    """ConvSpecs of the expand, depthwise and project convs of a bottleneck."""
    e = b.expansion_size
    return (
        ConvSpec(1, 1, 1, Padding.SAME, False, e),
        ConvSpec(b.kernel, b.kernel, b.stride, Padding.SAME, True, e),
        ConvSpec(1, 1, 1, Padding.SAME, False, b.out_channels),
    )


@dataclass(eq=False)
class ModelGraph:
    """Layers, weights and (in QUANTIZED mode) quantization metadata.

    ``weights[i]`` maps blob names to float32 arrays in REAL mode and to
    quantized ``Tensor`` objects (INT8 weights, INT32 biases) in QUANTIZED
    mode. ``act_params[i]`` maps activation edge names of layer ``i`` to
    their params; ``input_params`` covers the normalized network input.
    """

    input: InputSpec
    layers: List[LayerSpec]
    weights: List[Dict[str, object]]
    labels: List[str]
    mode: Mode = Mode.REAL
    act_params: List[Dict[str, QuantParams]] = field(default_factory=list)
    input_params: Optional[QuantParams] = None
    _compiled: Optional[list] = field(default=None, repr=False)

    def __post_init__(self):
        self.validate()

    # -- structure ---------------------------------------------------------

    def shapes(self) -> List[tuple]:
        """Input (h, w, c) of every layer followed by the final output shape."""
        out = [self.input.shape]
        for spec in self.layers:
            out.append(spec.output_shape(out[-1]))
        return out

    def validate(self):
        if not self.layers or self.layers[0].kind is not LayerKind.RESIZE:
            raise ShapeMismatch("graphs start with a RESIZE layer")
        if self.layers[-1].kind is not LayerKind.SOFTMAX:
            raise ShapeMismatch("graphs end with a SOFTMAX layer")
        if len(self.weights) != len(self.layers):
            raise ShapeMismatch("one weight dict per layer is required")
        shapes = self.shapes()
        for i, spec in enumerate(self.layers):
            expected = _weight_shapes(spec, shapes[i])
            got = self.weights[i]
            if set(got) != set(expected):
                raise ShapeMismatch(f"layer {i}: blobs {sorted(got)} != {sorted(expected)}")
            for name, shape in expected.items():
                if tuple(got[name].shape) != shape:
                    raise ShapeMismatch(f"layer {i} blob {name}: {got[name].shape} != {shape}")
        if shapes[-1][2] != len(self.labels):
            raise ShapeMismatch(f"{len(self.labels)} labels for {shapes[-1][2]} outputs")
        if self.mode is Mode.QUANTIZED:
            if self.input_params is None or len(self.act_params) != len(self.layers):
                raise ValueError("quantized graphs need params on every activation edge")
            for i, spec in enumerate(self.layers):
                for name, blob in self.weights[i].items():
                    if not isinstance(blob, Tensor) or blob.qparams is None:
                        raise ValueError(f"layer {i} blob {name} is not quantized")
                missing = set(_edge_names(spec)) - set(self.act_params[i])
                if missing:
                    raise ValueError(f"layer {i} lacks params for edges {sorted(missing)}")

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def param_count(self) -> int:
        """Trainable parameters (weights and biases); identical in both modes."""
        return int(sum(int(np.prod(b.shape)) for d in self.weights for b in d.values()))

    # -- execution ---------------------------------------------------------

    def preprocess(self, images) -> np.ndarray:
        """Validate, resize and normalize raw [0, 255] images to float64 NHWC."""
        x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != self.input.shape:
            raise ShapeMismatch(f"expected images of shape {self.input.shape}, got {x.shape}")
        h, w = self.layers[0].size
        x = K.resize_bilinear(Tensor.real(x), h, w).data.astype(np.float64)
        return x * self.input.norm_scale + self.input.norm_offset

    def forward_real(self, x: np.ndarray, hook: Optional[Callable] = None) -> np.ndarray:
        """Run layers 1.. on normalized input; returns probabilities.

        ``hook(layer_index, edge_name, array)`` sees every activation edge.
        """
        for i in range(1, len(self.layers)):
            x = _run_real_layer(self.layers[i], self.weights[i], x, lambda n, a, i=i: hook and hook(i, n, a))
        return x

    def forward_quantized(self, x: np.ndarray, hook: Optional[Callable] = None,
                          trace: Optional[list] = None) -> np.ndarray:
        if self.mode is not Mode.QUANTIZED:
            raise ValueError("graph is not quantized")
        t = Tensor(quantize_array(x, self.input_params), self.input_params)
        compiled = self.compiled()
        for i in range(1, len(self.layers)):
            spec = self.layers[i]
            if spec.kind is LayerKind.SOFTMAX:
                return K.softmax(t.dequantize().reshape(t.shape[0], -1))
            out = _run_q_layer(spec, compiled[i], t)
            if trace is not None:
                trace.append((i, t.nbytes, out.nbytes, out.data.dtype))
            if hook is not None:
                hook(i, "out", out)
            t = out
        raise AssertionError("unreachable: graph ends with SOFTMAX")

    def predict_proba(self, images) -> np.ndarray:
        x = self.preprocess(images)
        if self.mode is Mode.QUANTIZED:
            return self.forward_quantized(x)
        return self.forward_real(x).reshape(x.shape[0], -1)

    def compiled(self) -> list:
        """Per-layer QLayer/QBneck objects with precomputed requant multipliers."""
        if self._compiled is None:
            self._compiled = [_compile_layer(self, i) for i in range(len(self.layers))]
        return self._compiled


def infer(graph: ModelGraph, image) -> np.ndarray:
    """Class probabilities for one raw image (or a batch)."""
    probs = graph.predict_proba(image)
    return probs[0] if np.ndim(image.data if isinstance(image, Tensor) else image) == 3 else probs


# ---------------------------------------------------------------------------
# real execution


def _edge_names(spec: LayerSpec) -> List[str]:
    if spec.kind in (LayerKind.CONV, LayerKind.FC):
        return ["out"]
    if spec.kind is LayerKind.BNECK:
        names = ["expand", "dw"]
        if spec.bneck.use_se:
            names += ["se_reduce", "se_expand"]
        names.append("project")
        return names
    return []


def _run_real_layer(spec: LayerSpec, w: Dict[str, np.ndarray], x: np.ndarray, emit) -> np.ndarray:
    kind = spec.kind
    if kind is LayerKind.CONV:
        y = K.conv2d_real(x, w["w"], w["b"].reshape(-1), spec.conv, spec.activation)
        emit("out", y)
        return y
    if kind is LayerKind.FC:
        y = K.fully_connected_real(x, w["w"], w["b"].reshape(-1), spec.activation)
        emit("out", y)
        return y
    if kind is LayerKind.BNECK:
        return _run_real_bneck(spec.bneck, w, x, emit)
    if kind is LayerKind.GLOBAL_AVGPOOL:
        return K.global_avgpool_real(x)
    if kind is LayerKind.AVGPOOL:
        return K.avgpool_real(x, spec.pool)
    if kind is LayerKind.SOFTMAX:
        return K.softmax(x.reshape(x.shape[0], -1))
    raise ValueError(f"layer kind {kind.name} cannot run inside the network body")


def _run_real_bneck(b: BneckSpec, w, x, emit) -> np.ndarray:
    exp_spec, dw_spec, proj_spec = bneck_sub_specs(b)
    h = K.conv2d_real(x, w["expand.w"], w["expand.b"].reshape(-1), exp_spec, Activation.RELU6)
    emit("expand", h)
    h = K.conv2d_real(h, w["dw.w"], w["dw.b"].reshape(-1), dw_spec, Activation.RELU6)
    emit("dw", h)
    if b.use_se:
        pooled = K.global_avgpool_real(h)
        s = K.fully_connected_real(pooled, w["se_reduce.w"], w["se_reduce.b"].reshape(-1), Activation.RELU6)
        emit("se_reduce", s)
        g = K.fully_connected_real(s, w["se_expand.w"], w["se_expand.b"].reshape(-1))
        emit("se_expand", g)
        h = h * K.hardsigmoid(g)
    h = K.conv2d_real(h, w["project.w"], w["project.b"].reshape(-1), proj_spec)
    emit("project", h)
    if b.has_residual(x.shape[-1]):
        h = h + x
        emit("out", h)
    return h


# ---------------------------------------------------------------------------
# quantized execution


def _run_q_layer(spec: LayerSpec, q, t: Tensor) -> Tensor:
    kind = spec.kind
    if kind is LayerKind.CONV:
        return K.conv2d_q(t, q)
    if kind is LayerKind.FC:
        return K.fully_connected_q(t, q)
    if kind is LayerKind.BNECK:
        return K.bneck_q(t, q)
    if kind is LayerKind.GLOBAL_AVGPOOL:
        return K.global_avgpool_q(t)
    if kind is LayerKind.AVGPOOL:
        return K.avgpool_q(t, spec.pool)
    raise ValueError(f"layer kind {kind.name} has no integer kernel")


def _layer_in_params(graph: ModelGraph, i: int) -> QuantParams:
    """Params of the activation feeding layer ``i`` (pooling keeps params)."""
    for j in range(i - 1, 0, -1):
        spec = graph.layers[j]
        if spec.kind in (LayerKind.CONV, LayerKind.FC):
            return graph.act_params[j]["out"]
        if spec.kind is LayerKind.BNECK:
            p = graph.act_params[j]
            return p.get("out", p["project"])
    return graph.input_params


def _compile_layer(graph: ModelGraph, i: int):
    spec = graph.layers[i]
    w = graph.weights[i]
    p = graph.act_params[i]
    if spec.kind not in (LayerKind.CONV, LayerKind.FC, LayerKind.BNECK):
        return None
    in_params = _layer_in_params(graph, i)
    if spec.kind is LayerKind.CONV:
        return QLayer(spec.conv, w["w"], w["b"], in_params, p["out"], spec.activation)
    if spec.kind is LayerKind.FC:
        cs = ConvSpec(1, 1, 1, Padding.VALID, False, spec.units)
        return QLayer(cs, w["w"], w["b"], in_params, p["out"], spec.activation)
    b = spec.bneck
    exp_spec, dw_spec, proj_spec = bneck_sub_specs(b)
    expand = QLayer(exp_spec, w["expand.w"], w["expand.b"], in_params, p["expand"], Activation.RELU6)
    dw = QLayer(dw_spec, w["dw.w"], w["dw.b"], p["expand"], p["dw"], Activation.RELU6)
    se_r = se_e = None
    if b.use_se:
        r = K.se_reduce_width(b.expansion_size)
        se_r = QLayer(ConvSpec(1, 1, 1, Padding.VALID, False, r), w["se_reduce.w"], w["se_reduce.b"],
                      p["dw"], p["se_reduce"], Activation.RELU6)
        se_e = QLayer(ConvSpec(1, 1, 1, Padding.VALID, False, b.expansion_size), w["se_expand.w"],
                      w["se_expand.b"], p["se_reduce"], p["se_expand"])
    project = QLayer(proj_spec, w["project.w"], w["project.b"], p["dw"], p["project"])
    out_params = residual = None
    if "out" in p:
        out_params = p["out"]
        residual = K.residual_multipliers(p["project"], in_params, out_params)
    return QBneck(b, expand, dw, project, se_r, se_e, out_params, residual)


# ---------------------------------------------------------------------------
# post-training quantization


def _sub_convs(spec: LayerSpec) -> List[tuple]:
    """(weight prefix, input edge or None for layer input, output edge) triples."""
    if spec.kind in (LayerKind.CONV, LayerKind.FC):
        return [("", None, "out")]
    if spec.kind is LayerKind.BNECK:
        subs = [("expand.", None, "expand"), ("dw.", "expand", "dw")]
        if spec.bneck.use_se:
            subs += [("se_reduce.", "dw", "se_reduce"), ("se_expand.", "se_reduce", "se_expand")]
        subs.append(("project.", "dw", "project"))
        return subs
    return []


def _quantize_conv_weights(w: np.ndarray, b: np.ndarray, in_scale: float):
    wp = symmetric_channel_params(w)
    wq = Tensor(quantize_array(w, wp), wp)
    bias_scales = [in_scale * s for s in wp.scales]
    bq = round_half_away(np.asarray(b, dtype=np.float64) / np.asarray(bias_scales))
    bq = np.clip(np.atleast_1d(bq), -(2**31), 2**31 - 1).astype(np.int32).reshape(b.shape)
    return wq, Tensor(bq, QuantParams.per_channel(bias_scales))


def _ensure_multiplier_below_one(out: QuantParams, in_scale: float, wq: Tensor) -> QuantParams:
    # integer requantization only supports real multipliers in (0, 1)
    need = in_scale * max(wq.qparams.scales) * (1.0 + 1e-6)
    if out.scale > need:
        return out
    return QuantParams.per_tensor(need, out.zero_point)


def quantize_model(graph: ModelGraph, calib: Iterable) -> ModelGraph:
    """Post-training INT8 quantization with min/max calibration.

    ``calib`` yields raw [0, 255] images (single or batched). Every
    activation edge gets asymmetric per-tensor params from the min/max seen
    while running the REAL graph over all calibration images.
    """
    if graph.mode is not Mode.REAL:
        raise ValueError("quantize_model expects a REAL graph")
    stats: Dict[tuple, CalibrationStats] = {}
    in_stats = CalibrationStats()

    def hook(i, name, arr):
        stats[(i, name)] = observe(stats.get((i, name), CalibrationStats()), arr)

    n = 0
    for img in calib:
        x = graph.preprocess(img)
        in_stats = observe(in_stats, x)
        graph.forward_real(x, hook)
        n += 1
    if n == 0:
        raise EmptyCalibrationSet("at least one calibration image is required")

    input_params = in_stats.params()
    act_params: List[Dict[str, QuantParams]] = []
    qweights: List[Dict[str, Tensor]] = []
    current = input_params  # params of the edge feeding the next layer
    for i, spec in enumerate(graph.layers):
        edges: Dict[str, QuantParams] = {}
        blobs: Dict[str, Tensor] = {}
        for prefix, src, dst in _sub_convs(spec):
            in_p = current if src is None else edges[src]
            wq, bq = _quantize_conv_weights(graph.weights[i][prefix + "w"], graph.weights[i][prefix + "b"], in_p.scale)
            blobs[prefix + "w"], blobs[prefix + "b"] = wq, bq
            edges[dst] = _ensure_multiplier_below_one(stats[(i, dst)].params(), in_p.scale, wq)
        if spec.kind is LayerKind.BNECK and (i, "out") in stats:
            edges["out"] = stats[(i, "out")].params()
        if spec.kind in (LayerKind.CONV, LayerKind.FC):
            current = edges["out"]
        elif spec.kind is LayerKind.BNECK:
            current = edges.get("out", edges["project"])
        act_params.append(edges)
        qweights.append(blobs)
    return ModelGraph(graph.input, list(graph.layers), qweights, list(graph.labels),
                      Mode.QUANTIZED, act_params, input_params)


def layer_errors(real: ModelGraph, quant: ModelGraph, images: Sequence, isolated: bool = False) -> List[dict]:
    """Per-layer |dequantized quantized output - real output| in output-scale units.

    Each row reports the mean and the maximum over all elements and images.

    By default the quantized graph runs end to end, so errors accumulate
    along the chain. With ``isolated=True`` every quantized layer is fed the
    quantized REAL-graph input of that layer instead, which measures each
    layer's own error.
    """
    compiled = quant.compiled()
    rows: Dict[int, list] = {}
    for img in images:
        x = real.preprocess(img)
        real_in = {}
        outs_real = {}
        h = x
        for i in range(1, len(real.layers) - 1):
            real_in[i] = h
            h = _run_real_layer(real.layers[i], real.weights[i], h, lambda *_: None)
            outs_real[i] = h
        got: Dict[int, Tensor] = {}
        if isolated:
            for i in outs_real:
                p = _layer_in_params(quant, i)
                t = Tensor(quantize_array(real_in[i], p), p)
                got[i] = _run_q_layer(quant.layers[i], compiled[i], t)
        else:
            quant.forward_quantized(x, hook=lambda i, n, t: got.__setitem__(i, t))
        for i, t in got.items():
            err = np.abs(t.dequantize() - outs_real[i]) / t.qparams.scale
            rows.setdefault(i, []).append((err.mean(), err.max()))
    return [
        {
            "layer": i,
            "kind": real.layers[i].kind.name,
            "mean_abs_err_scales": float(np.mean([m for m, _ in v])),
            "max_abs_err_scales": float(max(x for _, x in v)),
        }
        for i, v in sorted(rows.items())
    ]
