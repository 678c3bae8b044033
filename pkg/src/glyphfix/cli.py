"""Command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .model import PipelineConfig, load_manifest
from .pipeline import RunConfig, ablation_sweep, ablation_table, run_full

DEFAULTS = PipelineConfig()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="glyphfix",
        description="Correct OCR substitution errors by clustering repeated glyph shapes.",
    )
    p.add_argument("--mode", choices=RunConfig.MODES, default="full")
    p.add_argument("--manifest", type=Path, help="JSON manifest of sub-collections (output path in synth mode)")
    p.add_argument("--output-dir", "-o", type=Path, default=Path("glyphfix-out"))
    p.add_argument("--debug-dir", type=Path)
    p.add_argument("--jobs", type=int, default=1, help="worker processes across sub-collections")
    p.add_argument("--seed", type=int, default=DEFAULTS.rng_seed)

    g = p.add_argument_group("pipeline parameters")
    g.add_argument("--H", type=int, default=DEFAULTS.H, help="character canvas height")
    g.add_argument("--W", type=int, default=DEFAULTS.W, help="character canvas width")
    g.add_argument("--scale-base", type=float, default=DEFAULTS.s)
    g.add_argument("--q-variance", type=float, default=DEFAULTS.q_variance)
    g.add_argument("--K", type=int, default=DEFAULTS.K, help="initial GMM components")
    g.add_argument("--n-min", type=int, default=DEFAULTS.n_min)
    g.add_argument("--p-thr", type=float, default=DEFAULTS.p_thr)
    g.add_argument("--num-pcs", type=int, default=DEFAULTS.k, help="principal components tested per node")
    g.add_argument("--f-thr", type=float, default=DEFAULTS.f_thr)
    g.add_argument("--lambda-h", type=float, default=DEFAULTS.lambda_h)

    e = p.add_argument_group("evaluation and ablation")
    e.add_argument("--corrected-dir", type=Path, help="detections to score against the base ones (evaluate mode)")
    e.add_argument("--resamples", type=int, default=10_000, help="bootstrap resamples")
    e.add_argument("--K-values", type=int, nargs="+", default=[200, 500, 700], help="K sweep (ablate mode)")

    s = p.add_argument_group("synthetic corpus (synth mode)")
    s.add_argument("--n-chars", type=int, default=5000)
    s.add_argument("--error-rate", type=float, default=0.1)
    s.add_argument("--noise", type=float, default=0.03)
    s.add_argument("--sub-collections", type=int, default=1)
    s.add_argument("--font", action="append", type=Path, help="font file (repeatable); DejaVu Sans/Serif by default")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    return PipelineConfig(
        H=args.H,
        W=args.W,
        s=args.scale_base,
        q_variance=args.q_variance,
        K=args.K,
        n_min=args.n_min,
        p_thr=args.p_thr,
        k=args.num_pcs,
        f_thr=args.f_thr,
        lambda_h=args.lambda_h,
        rng_seed=args.seed,
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = config_from_args(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.mode == "synth":
        from .synth import synth_corpus

        path = synth_corpus(
            args.output_dir,
            n_chars=args.n_chars,
            error_rate=args.error_rate,
            noise=args.noise,
            seed=args.seed,
            fonts=args.font,
            n_sub_collections=args.sub_collections,
        )
        print(path)
        return 0

    if args.manifest is None:
        print("error: --manifest is required", file=sys.stderr)
        return 2

    if args.mode == "ablate":
        args.output_dir.mkdir(parents=True, exist_ok=True)
        rows = ablation_sweep(load_manifest(args.manifest), args.K_values, config, args.output_dir / "cache")
        table = ablation_table(rows)
        (args.output_dir / "ablation.txt").write_text(table + "\n", encoding="utf-8")
        (args.output_dir / "ablation.json").write_text(
            json.dumps([r.__dict__ for r in rows], indent=2), encoding="utf-8"
        )
        print(table)
        return 0

    rc = RunConfig(
        config,
        args.manifest,
        args.output_dir,
        args.mode,
        args.debug_dir,
        args.jobs,
        args.resamples,
        args.corrected_dir,
    )
    result = run_full(rc)
    if result.report is not None:
        print(result.report.to_text())
    else:
        for name, run in result.runs.items():
            msg = f"{name}: {len(run.prepared.images)} characters"
            if run.gmm_clusters is not None:
                msg += f", {len(run.gmm_clusters)} GMM clusters"
            if run.refined is not None:
                msg += f", {len(run.refined.leaves)} leaves ({100 * run.refined.retained_proportion:.1f}% retained)"
            print(msg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
