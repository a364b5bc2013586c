"""scikit-learn estimator wrapper around a (quantized) scene classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from maiq.dataset import IMAGE_H, IMAGE_W
from maiq.errors import ShapeMismatch
from maiq.graph import ModelGraph, quantize_model
from maiq.presets import build_preset, color_probe


def check_images(X, height: int = IMAGE_H, width: int = IMAGE_W) -> np.ndarray:
    """Validate a batch of raw RGB images in [0, 255]; returns float64 (n, h, w, 3)."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != (height, width, 3):
        raise ShapeMismatch(f"expected images of shape (n, {height}, {width}, 3), got {X.shape}")
    if X.min() < 0 or X.max() > 255:
        raise ValueError("pixel values must lie in [0, 255]")
    return X


class SceneClassifier(ClassifierMixin, BaseEstimator):
    """Scene classifier built from a preset (or a given graph).

    ``fit`` builds the network and, when ``quantized`` is true, calibrates
    INT8 params on ``X`` (labels are not used: no weights are trained).

    Parameters
    ----------
    preset : {"bytescene", "evai", "tiny"}
    seed : int
        Weight-initialisation seed.
    quantized : bool
        Run INT8 inference after min/max calibration on ``X``.
    graph : ModelGraph, optional
        REAL-mode graph to use instead of building ``preset``.
    probe_colors : array of shape (30, 3), optional
        Install color-probe weights (TINY only) for these class colors.
    """

    def __init__(self, preset="tiny", seed=0, quantized=True, graph=None, probe_colors=None):
        self.preset = preset
        self.seed = seed
        self.quantized = quantized
        self.graph = graph
        self.probe_colors = probe_colors

    def fit(self, X, y=None):
        X = check_images(X)
        g = self.graph if self.graph is not None else build_preset(self.preset, self.seed)
        if self.probe_colors is not None:
            g = color_probe(g, self.probe_colors)
        self.real_graph_ = g
        self.graph_: ModelGraph = quantize_model(g, list(X)) if self.quantized else g
        self.classes_ = np.arange(g.num_classes)
        self.labels_ = list(g.labels)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "graph_")
        return self.graph_.predict_proba(check_images(X))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
