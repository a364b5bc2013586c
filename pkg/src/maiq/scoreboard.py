"""Top-k evaluation, the challenge final score and leaderboard rendering.

The final score is ``2 ** (top1 + top3) / (C * runtime_ms)`` with both
accuracies in percentage points and ``C = 2 ** 185``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from maiq.dataset import Dataset, normalize_name
from maiq.errors import EmptyCorpus, LabelMismatch, NonPositiveRuntime

LOG2C = 185

REPORT_SCHEMA = {
    "type": "object",
    "required": ["n", "top1", "top3", "labels", "per_class_accuracy", "confusion"],
    "properties": {
        "n": {"type": "integer", "minimum": 1},
        "top1": {"type": "number", "minimum": 0, "maximum": 1},
        "top3": {"type": "number", "minimum": 0, "maximum": 1},
        "labels": {"type": "array", "items": {"type": "string"}},
        "per_class_accuracy": {"type": "array", "items": {"type": ["number", "null"]}},
        "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "runtime_ms": {"type": "number", "exclusiveMinimum": 0},
        "final_score": {"type": "number", "minimum": 0},
    },
    "additionalProperties": False,
}


@dataclass(frozen=True)
class ScoringConfig:
    log2c: float = LOG2C
    decimals: int = 2


def final_score(top1_pct: float, top3_pct: float, runtime_ms: float,
                cfg: Optional[ScoringConfig] = None) -> float:
    cfg = cfg or ScoringConfig()
    if not runtime_ms > 0:
        raise NonPositiveRuntime(f"runtime must be positive, got {runtime_ms}")
    # 2**(top1 + top3) alone overflows doubles; combine exponents first
    log2_score = (top1_pct + top3_pct - cfg.log2c) - math.log2(runtime_ms)
    return 2.0**log2_score


def topk(probs, k: int) -> List[int]:
    """Indices of the ``k`` largest probabilities; ties go to the lower index."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if not 1 <= k <= p.size:
        raise ValueError(f"k={k} outside [1, {p.size}]")
    return np.argsort(-p, kind="stable")[:k].tolist()


@dataclass
class EvalReport:
    n: int
    top1: float
    top3: float
    confusion: np.ndarray
    labels: List[str] = field(default_factory=list)

    @property
    def per_class_accuracy(self) -> List[Optional[float]]:
        rows = self.confusion.sum(axis=1)
        return [float(self.confusion[i, i] / r) if r else None for i, r in enumerate(rows)]

    def to_dict(self, runtime_ms: Optional[float] = None, cfg: Optional[ScoringConfig] = None) -> dict:
        out = {
            "n": int(self.n),
            "top1": float(self.top1),
            "top3": float(self.top3),
            "labels": list(self.labels),
            "per_class_accuracy": self.per_class_accuracy,
            "confusion": self.confusion.astype(int).tolist(),
        }
        if runtime_ms is not None:
            out["runtime_ms"] = float(runtime_ms)
            out["final_score"] = final_score(100 * self.top1, 100 * self.top3, runtime_ms, cfg)
        return out


def report_from_predictions(probs: np.ndarray, labels: Sequence[int], names: Sequence[str]) -> EvalReport:
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise EmptyCorpus("nothing to evaluate")
    n_cls = len(names)
    confusion = np.zeros((n_cls, n_cls), dtype=np.int64)
    hit1 = hit3 = 0
    for p, y in zip(probs, labels):
        ranked = topk(p, min(3, n_cls))
        confusion[y, ranked[0]] += 1
        hit1 += ranked[0] == y
        hit3 += y in ranked
    n = len(labels)
    return EvalReport(n, hit1 / n, hit3 / n, confusion, list(names))


def check_labels(model_labels: Sequence[str], corpus_labels: Sequence[str]):
    a = [normalize_name(x) for x in model_labels]
    b = [normalize_name(x) for x in corpus_labels]
    if a != b:
        diff = next((i for i, (x, y) in enumerate(zip(a, b)) if x != y), min(len(a), len(b)))
        raise LabelMismatch(
            f"model label table differs from corpus registry at index {diff} "
            f"({len(a)} vs {len(b)} labels)"
        )


def evaluate(model, corpus: Dataset, threads: int = 1) -> EvalReport:
    """Top-1/top-3 accuracy and confusion matrix of ``model`` over ``corpus``."""
    check_labels(model.labels, corpus.registry.names)
    if len(corpus) == 0:
        raise EmptyCorpus("empty corpus")

    def run(item):
        return model.predict_proba(item.pixels)[0]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            probs = list(pool.map(run, corpus))
    else:
        probs = [run(item) for item in corpus]
    return report_from_predictions(np.stack(probs), corpus.labels, corpus.registry.names)


@dataclass(frozen=True)
class ScoreRow:
    name: str
    top1_pct: float
    top3_pct: float
    runtime_ms: float
    final_score: float

    @classmethod
    def compute(cls, name, top1_pct, top3_pct, runtime_ms, cfg=None) -> "ScoreRow":
        return cls(name, top1_pct, top3_pct, runtime_ms, final_score(top1_pct, top3_pct, runtime_ms, cfg))


def format_score(score: float, decimals: int = 2) -> str:
    return f"{score:.{decimals}f}"


def render_leaderboard(rows: Sequence[ScoreRow], decimals: int = 2) -> str:
    ordered = sorted(rows, key=lambda r: -r.final_score)  # sorted() is stable
    width = max([len("Team")] + [len(r.name) for r in ordered])
    header = f"{'#':>2}  {'Team':<{width}}  {'Top-1, %':>8}  {'Top-3, %':>8}  {'Runtime, ms':>11}  {'Final Score':>11}"
    lines = [header, "-" * len(header)]
    for rank, r in enumerate(ordered, 1):
        lines.append(
            f"{rank:>2}  {r.name:<{width}}  {r.top1_pct:>8.2f}  {r.top3_pct:>8.2f}  "
            f"{r.runtime_ms:>11.2f}  {format_score(r.final_score, decimals):>11}"
        )
    return "\n".join(lines)
