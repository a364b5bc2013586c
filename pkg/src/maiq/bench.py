"""Wall-clock latency of single-image inference (warmup, then timed runs)."""

from __future__ import annotations

import statistics
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np

from maiq.graph import Mode, ModelGraph


@dataclass(frozen=True)
class BenchReport:
    warmup_runs: int
    timed_runs: int
    latencies_ms: List[float]
    median_ms: float
    mean_ms: float
    std_ms: float
    min_ms: float
    fps: float
    includes_preprocessing: bool
    threads: Optional[int] = None
    outputs_identical: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    def render(self) -> str:
        scope = "incl. preprocessing" if self.includes_preprocessing else "network only"
        return (
            f"runs={self.timed_runs} warmup={self.warmup_runs} ({scope})\n"
            f"median={self.median_ms:.3f} ms mean={self.mean_ms:.3f} ms "
            f"std={self.std_ms:.3f} ms min={self.min_ms:.3f} ms\n"
            f"fps={self.fps:.1f}"
        )


def summarize(latencies_ms: List[float]) -> dict:
    """Aggregates used by BenchReport; median drives the FPS figure."""
    median = statistics.median(latencies_ms)
    return {
        "median_ms": median,
        "mean_ms": statistics.fmean(latencies_ms),
        "std_ms": statistics.pstdev(latencies_ms),
        "min_ms": min(latencies_ms),
        "fps": 1000.0 / median,
    }


def _thread_limit(threads: Optional[int]):
    if not threads:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def benchmark(model: ModelGraph, image, warmup: int = 5, runs: int = 50,
              include_preprocessing: bool = False, threads: Optional[int] = None) -> BenchReport:
    if runs < 3:
        raise ValueError("at least 3 timed runs are required")
    x = model.preprocess(image)
    if include_preprocessing:
        def step():
            return model.predict_proba(image)
    elif model.mode is Mode.QUANTIZED:
        def step():
            return model.forward_quantized(x)
    else:
        def step():
            return model.forward_real(x)

    latencies = []
    with _thread_limit(threads):
        reference = step()
        identical = True
        for _ in range(warmup):
            step()
        for _ in range(runs):
            t0 = time.perf_counter_ns()
            out = step()
            latencies.append((time.perf_counter_ns() - t0) / 1e6)
            identical &= bool(np.array_equal(out, reference))
    return BenchReport(
        warmup_runs=warmup,
        timed_runs=runs,
        latencies_ms=latencies,
        includes_preprocessing=include_preprocessing,
        threads=threads,
        outputs_identical=identical,
        **summarize(latencies),
    )
