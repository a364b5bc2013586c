"""INT8 quantized CNN inference engine and scene-detection challenge harness."""

from maiq.graph import LayerKind, LayerSpec, Mode, ModelGraph, infer, quantize_model
from maiq.presets import PresetId, build_preset, color_probe
from maiq.scoreboard import EvalReport, ScoreRow, evaluate, final_score, render_leaderboard, topk
from maiq.serialize import load, save, serialized_size
from maiq.tensor import QuantParams, Tensor

__all__ = [
    "EvalReport", "LayerKind", "LayerSpec", "Mode", "ModelGraph", "PresetId", "QuantParams",
    "ScoreRow", "Tensor", "build_preset", "color_probe", "evaluate", "final_score", "infer",
    "load", "quantize_model", "render_leaderboard", "save", "serialized_size", "topk",
]
