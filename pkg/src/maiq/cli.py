"""Command-line entry point: ``maiq <command> [flags]``.

Exit codes: 0 success, 1 domain error (message on stderr), 2 usage error.
``MAIQ_THREADS`` sets the default thread count for evaluate and bench.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from maiq import serialize
from maiq.bench import benchmark
from maiq.dataset import IMAGE_H, IMAGE_W, SyntheticSpec, decode_image, default_palette, generate_synthetic, scan_corpus
from maiq.errors import MaiqError
from maiq.graph import Mode, quantize_model
from maiq.presets import PresetId, build_preset, color_probe
from maiq.scoreboard import ScoringConfig, evaluate, final_score, format_score, topk


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("MAIQ_THREADS", "1")))
    except ValueError:
        return 1


def cmd_build(args) -> int:
    g = build_preset(args.preset, args.seed)
    if args.color_probe:
        g = color_probe(g, default_palette())
    n = serialize.save(g, args.out)
    print(f"{args.preset}: {g.param_count()} parameters, {n} bytes -> {args.out}")
    return 0


def cmd_quantize(args) -> int:
    g = serialize.load(args.model)
    corpus = scan_corpus(args.calib)
    items = list(corpus)
    if args.limit:
        items = items[: args.limit]
    q = quantize_model(g, (it.pixels for it in items))
    n = serialize.save(q, args.out)
    print(f"quantized with {len(items)} calibration images, {n} bytes -> {args.out}")
    return 0


def cmd_classify(args) -> int:
    g = serialize.load(args.model)
    probs = g.predict_proba(decode_image(args.image))[0]
    for rank, idx in enumerate(topk(probs, min(args.top, len(probs))), 1):
        print(f"{rank}. {g.labels[idx]}\t{probs[idx]:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    g = serialize.load(args.model)
    report = evaluate(g, scan_corpus(args.data), threads=args.threads)
    cfg = ScoringConfig(log2c=args.log2c)
    print(f"n={report.n} top1={100 * report.top1:.2f} top3={100 * report.top3:.2f}")
    if args.runtime_ms is not None:
        score = final_score(100 * report.top1, 100 * report.top3, args.runtime_ms, cfg)
        print(f"final_score={format_score(score)}")
    if args.json:
        doc = report.to_dict(args.runtime_ms, cfg)
        Path(args.json).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_bench(args) -> int:
    g = serialize.load(args.model)
    if args.image:
        image = decode_image(args.image)
    else:
        image = np.full((IMAGE_H, IMAGE_W, 3), 127.0)
    report = benchmark(g, image, warmup=args.warmup, runs=args.runs,
                       include_preprocessing=args.include_preprocessing, threads=args.threads)
    mode = "INT8" if g.mode is Mode.QUANTIZED else "REAL"
    print(f"model={args.model} mode={mode} threads={args.threads}")
    print(report.render())
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_score(args) -> int:
    print(format_score(final_score(args.top1, args.top3, args.runtime_ms, ScoringConfig(log2c=args.log2c))))
    return 0


def cmd_synth(args) -> int:
    files = generate_synthetic(SyntheticSpec(args.per_class, args.noise, args.seed), args.out)
    print(f"wrote {len(files)} images under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maiq", description="INT8 scene-detection inference toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    threads = _default_threads()

    s = sub.add_parser("build", help="instantiate a preset architecture")
    s.add_argument("--preset", required=True, choices=[x.value for x in PresetId])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--color-probe", action="store_true",
                   help="install color-probe weights for the synthetic palette (tiny only)")
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("quantize", help="post-training INT8 quantization")
    s.add_argument("--model", required=True)
    s.add_argument("--calib", required=True, help="calibration corpus directory")
    s.add_argument("--limit", type=int, default=0, help="use at most N calibration images")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("classify", help="top-k prediction for one image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--top", type=int, default=3)
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("evaluate", help="top-1/top-3 accuracy over a corpus")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--runtime-ms", type=float)
    s.add_argument("--log2c", type=float, default=185.0)
    s.add_argument("--json")
    s.add_argument("--threads", type=int, default=threads)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("bench", help="inference latency")
    s.add_argument("--model", required=True)
    s.add_argument("--image")
    s.add_argument("--runs", type=int, default=50)
    s.add_argument("--warmup", type=int, default=5)
    s.add_argument("--threads", type=int, default=threads)
    s.add_argument("--include-preprocessing", action="store_true")
    s.add_argument("--json")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("score", help="challenge final score")
    s.add_argument("--top1", type=float, required=True)
    s.add_argument("--top3", type=float, required=True)
    s.add_argument("--runtime-ms", type=float, required=True)
    s.add_argument("--log2c", type=float, default=185.0)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("synth", help="generate a synthetic color corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--per-class", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=int, default=8)
    s.set_defaults(func=cmd_synth)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (MaiqError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
