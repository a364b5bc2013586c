"""Reference architectures and the hand-built color-probe weights."""

from __future__ import annotations

import enum
from typing import List, Sequence

import numpy as np

from maiq.dataset import CATEGORIES, IMAGE_H, IMAGE_W
from maiq.graph import InputSpec, LayerKind, LayerSpec, ModelGraph, _weight_shapes
from maiq.kernels import Activation

RELU6 = Activation.RELU6
NONE = Activation.NONE


class PresetId(enum.Enum):
    BYTESCENE = "bytescene"
    EVAI = "evai"
    TINY = "tiny"


# (expansion size, squeeze-excite, stride, output channels), one per bneck row
BYTESCENE_BLOCKS = [
    (16, False, 1, 16),
    (48, True, 2, 24),
    (72, True, 2, 32),
    (64, True, 1, 32),
    (96, True, 1, 32),
    (96, False, 2, 64),
    (128, False, 1, 64),
    (256, False, 1, 64),
    (320, True, 1, 96),
    (192, True, 1, 96),
    (288, True, 1, 96),
    (576, True, 2, 192),
    (768, True, 1, 192),
    (960, True, 1, 192),
    (768, True, 1, 192),
    (960, True, 1, 192),
    (960, True, 1, 192),
    (768, True, 1, 192),
    (1152, True, 1, 192),
]


def _make_divisible(v: float, divisor: int = 8) -> int:
    new_v = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


def bytescene_layers() -> List[LayerSpec]:
    layers = [LayerSpec(LayerKind.RESIZE, size=(128, 128)), LayerSpec.conv2d(3, 2, 16)]
    layers += [LayerSpec.block(*row) for row in BYTESCENE_BLOCKS]
    layers += [
        LayerSpec.conv2d(1, 1, 1024),
        LayerSpec(LayerKind.GLOBAL_AVGPOOL),
        LayerSpec.fc(1280, RELU6),
        LayerSpec.fc(len(CATEGORIES)),
        LayerSpec(LayerKind.SOFTMAX),
    ]
    return layers


def evai_layers(alpha: float = 0.75) -> List[LayerSpec]:
    """MobileNetV2 through block 14, then a separable-conv head with 30 maps."""
    # (expansion factor, base channels, repeats, first stride); block15/16 dropped
    settings = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 2, 2)]
    c = _make_divisible(32 * alpha)
    layers = [LayerSpec(LayerKind.RESIZE, size=(IMAGE_H // 4, IMAGE_W // 4)), LayerSpec.conv2d(3, 2, c)]
    for t, base, n, s in settings:
        out = _make_divisible(base * alpha)
        for r in range(n):
            layers.append(LayerSpec.block(t * c, False, s if r == 0 else 1, out))
            c = out
    layers += [
        LayerSpec.conv2d(3, 1, c, NONE, depthwise=True),
        LayerSpec.conv2d(1, 1, len(CATEGORIES), RELU6),
        LayerSpec(LayerKind.GLOBAL_AVGPOOL),
        LayerSpec(LayerKind.SOFTMAX),
    ]
    return layers


def tiny_layers() -> List[LayerSpec]:
    """Eight 3x3 convs (strides 4 and 2 up front), four 2x2 average pools, one FC."""
    pool = LayerSpec(LayerKind.AVGPOOL, pool=2)
    return [
        LayerSpec(LayerKind.RESIZE, size=(128, 128)),
        LayerSpec.conv2d(3, 4, 6),
        LayerSpec.conv2d(3, 2, 12),
        LayerSpec.conv2d(3, 1, 12),
        LayerSpec.conv2d(3, 1, 12),
        pool,
        LayerSpec.conv2d(3, 1, 24),
        LayerSpec.conv2d(3, 1, 24),
        pool,
        LayerSpec.conv2d(3, 1, 48),
        pool,
        LayerSpec.conv2d(3, 1, 96),
        pool,
        LayerSpec.fc(len(CATEGORIES)),
        LayerSpec(LayerKind.SOFTMAX),
    ]


_LAYERS = {
    PresetId.BYTESCENE: bytescene_layers,
    PresetId.EVAI: evai_layers,
    PresetId.TINY: tiny_layers,
}


def init_weights(layers: Sequence[LayerSpec], input_spec: InputSpec, seed: int) -> list:
    """Fan-in scaled uniform weights and small uniform biases from one seeded stream."""
    rng = np.random.default_rng(seed)
    shape = input_spec.shape
    weights = []
    for spec in layers:
        blobs = {}
        for name, wshape in _weight_shapes(spec, shape).items():
            if name.endswith("b"):
                blobs[name] = rng.uniform(-0.05, 0.05, wshape).astype(np.float32)
            else:
                limit = np.sqrt(6.0 / int(np.prod(wshape[:-1])))
                blobs[name] = rng.uniform(-limit, limit, wshape).astype(np.float32)
        weights.append(blobs)
        shape = spec.output_shape(shape)
    return weights


def build_preset(preset, seed: int = 0) -> ModelGraph:
    """REAL-mode graph of a reference architecture with seeded random weights."""
    pid = PresetId(preset) if not isinstance(preset, PresetId) else preset
    layers = _LAYERS[pid]()
    input_spec = InputSpec(IMAGE_H, IMAGE_W, 3)
    return ModelGraph(input_spec, layers, init_weights(layers, input_spec, seed), list(CATEGORIES))


def color_probe(graph: ModelGraph, colors: np.ndarray) -> ModelGraph:
    """Overwrite a TINY graph with weights that classify by mean image color.

    The first conv splits each normalized channel ``x`` into ``relu(x)`` and
    ``relu(-x)`` (3x3 box average), every later conv copies those six maps
    through its centre tap, the pools average them, and the FC scores class
    ``k`` as ``2 m_k . x - |m_k|^2`` for normalized class color ``m_k``, i.e. the
    negated squared distance up to a class-independent term.
    """
    kinds = [s.kind for s in graph.layers]
    if kinds != [s.kind for s in tiny_layers()]:
        raise ValueError("color probe weights fit the TINY preset only")
    colors = np.asarray(colors, dtype=np.float64)
    if colors.shape != (graph.num_classes, 3):
        raise ValueError(f"need one RGB color per class, got {colors.shape}")
    means = colors * graph.input.norm_scale + graph.input.norm_offset
    new = []
    first = True
    for spec, blobs in zip(graph.layers, graph.weights):
        if spec.kind is LayerKind.CONV:
            w = np.zeros_like(blobs["w"])
            if first:
                for c in range(3):
                    w[:, :, c, c] = 1.0 / 9.0
                    w[:, :, c, c + 3] = -1.0 / 9.0
                first = False
            else:
                for c in range(6):
                    w[1, 1, c, c] = 1.0
            new.append({"w": w, "b": np.zeros_like(blobs["b"])})
        elif spec.kind is LayerKind.FC:
            w = np.zeros_like(blobs["w"])
            for c in range(3):
                w[0, 0, c, :] = 2.0 * means[:, c]
                w[0, 0, c + 3, :] = -2.0 * means[:, c]
            b = -(means**2).sum(axis=1).reshape(blobs["b"].shape)
            new.append({"w": w, "b": b.astype(np.float32)})
        else:
            new.append(dict(blobs))
    return ModelGraph(graph.input, list(graph.layers), new, list(graph.labels))
