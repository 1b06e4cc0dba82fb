"""Command-line surface.

Exit codes: 0 success, 1 domain error, 2 usage error. Seeds are always
explicit flags and echoed into outputs.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__, KEY_FORMAT_VERSION, MODEL_FORMAT_VERSION, REPORT_SCHEMA_VERSION
from .attack import (
    PipelineConfig,
    ProjectionParams,
    RefinerSpec,
    load_model,
    run_pipeline,
    save_model,
    train_shrinkage,
    training_recipe_specs,
)
from .bench import (
    BenchConfig,
    bench_config_from_json,
    emit_report,
    ingest_dataset,
    run_ablation,
    run_matrix,
    run_motivating,
)
from .errors import WmlabError
from .imagecore import load_image, save_image
from .metrics import quality_report
from .watermarks import (
    BitKey,
    DetectionPolicy,
    RingKey,
    detect_dwtdct,
    detect_dwtdctsvd,
    detect_ring,
    embed_dwtdct,
    embed_dwtdctsvd,
    embed_ring,
    key_from_json,
    key_to_json,
    make_bit_key,
    make_ring_key,
)

_VERSION_LINE = (
    f"wmlab {__version__} (key format {KEY_FORMAT_VERSION}, "
    f"model format {MODEL_FORMAT_VERSION}, report schema {REPORT_SCHEMA_VERSION})"
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wmlab", description=__doc__)
    parser.add_argument("--version", action="version", version=_VERSION_LINE)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a watermark key document")
    p.add_argument("--scheme", required=True, choices=("dwtdct", "dwtdctsvd", "ring"))
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--delta", type=float, default=4.0 / 255.0, help="QIM step (bit schemes)")
    p.add_argument("--size", type=int, default=256, help="target image size (ring scheme)")
    p.add_argument("--strength", type=float, default=0.15, help="blend strength (ring scheme)")

    p = sub.add_parser("embed", help="embed a watermark")
    p.add_argument("--scheme", required=True, choices=("dwtdct", "dwtdctsvd", "ring"))
    p.add_argument("--key", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("detect", help="detect a watermark")
    p.add_argument("--scheme", required=True, choices=("dwtdct", "dwtdctsvd", "ring"))
    p.add_argument("--key", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--json", action="store_true")
    p.add_argument("--null-samples", type=int, default=199)
    p.add_argument("--bit-threshold", type=int, default=23)
    p.add_argument("--p-threshold", type=float, default=0.01)

    p = sub.add_parser("train", help="train the frequency-shrinkage model")
    p.add_argument("--data", required=True, help="directory of clean PNG images")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--learn-rate", type=float, default=0.05)
    p.add_argument("--limit", type=int, default=200, help="max images to ingest")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("attack", help="run the removal pipeline on one image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", help="shrinkage model JSON (stage 1)")
    p.add_argument("--projection", action="store_true", help="use the analytic spectral projection for stage 1")
    p.add_argument("--alpha", type=float, default=None, help="projection alpha override")
    p.add_argument("--tau", type=float, default=2.0, help="projection attenuation threshold")
    p.add_argument("--refiner-cmd", help="external refiner command template with {input}/{output}/{strength}")
    p.add_argument("--builtin-refiner", action="store_true", help="force the built-in TV refiner (default)")
    p.add_argument("--refiner-strength", type=float, default=0.3)
    p.add_argument("--tv-weight", type=float, default=0.08)
    p.add_argument("--tv-iterations", type=int, default=120)
    p.add_argument("--refiner-timeout", type=float, default=300.0)
    p.add_argument("--no-freq", action="store_true")
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--no-color", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write an attack report JSON here")
    p.add_argument("--json", action="store_true")

    for name, help_text in (
        ("bench", "run the scheme x variant benchmark matrix"),
        ("ablate", "run the five-variant ring ablation"),
        ("motiv", "run the motivating two-arm comparison"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--workers", type=int, default=None, help="cap on parallel per-image tasks")
        p.add_argument("--json", action="store_true")
        if name == "motiv":
            p.add_argument("--n", type=int, default=20)

    return parser


def _load_key(path: str, scheme: str):
    with open(path) as fh:
        key, key_scheme = key_from_json(fh.read())
    if key_scheme != scheme:
        raise WmlabError(f"key is for scheme {key_scheme!r}, not {scheme!r}")
    return key


def _cmd_keygen(args) -> int:
    if args.scheme == "ring":
        key = make_ring_key(args.seed, size=args.size, strength=args.strength)
    else:
        key = make_bit_key(args.seed, delta=args.delta)
    with open(args.out, "w") as fh:
        fh.write(key_to_json(key, args.scheme))
    print(f"wrote {args.scheme} key (seed={args.seed}) to {args.out}")
    return 0


def _cmd_embed(args) -> int:
    key = _load_key(args.key, args.scheme)
    img = load_image(args.input)
    if args.scheme == "dwtdct":
        out = embed_dwtdct(img, key)
    elif args.scheme == "dwtdctsvd":
        out = embed_dwtdctsvd(img, key)
    else:
        out = embed_ring(img, key)
    save_image(out, args.out)
    quality = quality_report(out, img)
    if args.json:
        print(json.dumps({"output": args.out, "psnr": quality.psnr, "ssim": quality.ssim}))
    else:
        print(f"embedded {args.scheme} watermark: psnr={quality.psnr:.2f}dB -> {args.out}")
    return 0


def _cmd_detect(args) -> int:
    key = _load_key(args.key, args.scheme)
    img = load_image(args.input)
    policy = DetectionPolicy(bit_threshold=args.bit_threshold, p_threshold=args.p_threshold)
    if args.scheme == "dwtdct":
        report = detect_dwtdct(img, key, policy)
    elif args.scheme == "dwtdctsvd":
        report = detect_dwtdctsvd(img, key, policy)
    else:
        report = detect_ring(img, key, policy, null_samples=args.null_samples)
    if args.json:
        print(
            json.dumps(
                {
                    "scheme": report.scheme,
                    "detected": report.detected,
                    "bits_recovered": report.bits_recovered,
                    "ring_statistic": report.ring_statistic,
                    "p_value": report.p_value,
                    "threshold": report.threshold_used,
                }
            )
        )
    elif report.bits_recovered is not None:
        print(
            f"detected={'true' if report.detected else 'false'} "
            f"bits={report.bits_recovered} p={report.p_value:.2e}"
        )
    else:
        print(
            f"detected={'true' if report.detected else 'false'} "
            f"stat={report.ring_statistic:.6g} p={report.p_value:.2e}"
        )
    return 0


def _cmd_train(args) -> int:
    ingest = ingest_dataset(args.data, args.limit, args.seed)
    images = [img for _, img in ingest.images]
    model = train_shrinkage(
        images,
        training_recipe_specs(),
        epochs=args.epochs,
        learn_rate=args.learn_rate,
        seed=args.seed,
    )
    save_model(model, args.out)
    if args.json:
        print(json.dumps({"output": args.out, "final_loss": model.final_loss, "seed": args.seed}))
    else:
        print(f"trained on {len(images)} images, held-out L1 loss {model.final_loss:.6f} -> {args.out}")
    return 0


def _make_refiner(args) -> RefinerSpec:
    if args.refiner_cmd and args.builtin_refiner:
        raise WmlabError("--refiner-cmd and --builtin-refiner are mutually exclusive")
    if args.refiner_cmd:
        return RefinerSpec(
            kind="external",
            command_template=args.refiner_cmd,
            strength=args.refiner_strength,
            timeout_s=args.refiner_timeout,
        )
    return RefinerSpec(kind="builtin", tv_weight=args.tv_weight, iterations=args.tv_iterations)


def _cmd_attack(args, parser: argparse.ArgumentParser) -> int:
    if args.no_freq and args.no_refine and args.no_color:
        parser.error("all pipeline stages disabled")
    model = None
    projection = None
    if not args.no_freq:
        if args.projection:
            projection = ProjectionParams(alpha_override=args.alpha, tau=args.tau)
        elif args.model:
            model = load_model(args.model)
        else:
            parser.error("stage 1 enabled but neither --model nor --projection given")
    config = PipelineConfig(
        freq_recon=not args.no_freq,
        sem_refine=not args.no_refine,
        color_corr=not args.no_color,
        model=model,
        projection=projection,
        refiner=_make_refiner(args),
        master_seed=args.seed,
    )
    img = load_image(args.input)
    report = run_pipeline(img, config)
    save_image(report.final, args.out)
    summary = {
        "output": args.out,
        "stages": sorted(report.timings_ms),
        "timings_ms": report.timings_ms,
        "psnr": report.quality.psnr,
        "ssim": report.quality.ssim,
        "ssim_lum": report.quality.ssim_lum,
        "refiner_stderr": report.refiner_stderr,
        "seed": args.seed,
    }
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(summary, fh, indent=2)
    if args.json:
        print(json.dumps(summary))
    else:
        print(
            f"attacked -> {args.out} (psnr={report.quality.psnr:.2f}dB, "
            f"stages: {', '.join(sorted(report.timings_ms))})"
        )
    return 0


def _load_bench_config(path: str, workers: int | None = None) -> BenchConfig:
    from dataclasses import replace

    with open(path) as fh:
        config = bench_config_from_json(fh.read())
    if workers is not None:
        config = replace(config, workers=max(1, workers))
    return config


def _cmd_bench(args) -> int:
    config = _load_bench_config(args.config, args.workers)
    report = run_matrix(config)
    written = emit_report(report, config.formats, config.output_dir)
    _print_bench_result(report, written, args.json)
    return 0


def _cmd_ablate(args) -> int:
    config = _load_bench_config(args.config, args.workers)
    report = run_ablation(config)
    written = emit_report(report, config.formats, config.output_dir)
    _print_bench_result(report, written, args.json)
    return 0


def _print_bench_result(report, written, as_json: bool) -> None:
    if as_json:
        print(
            json.dumps(
                {
                    "files": written,
                    "cells": [
                        {
                            "scheme": c.scheme,
                            "variant": c.variant,
                            "success_rate": c.success_rate,
                            "n": c.n_valid,
                        }
                        for c in report.aggregates
                    ],
                }
            )
        )
    else:
        for cell in report.aggregates:
            rate = "n/a" if cell.success_rate is None else f"{100 * cell.success_rate:.1f}%"
            print(f"{cell.scheme:10s} {cell.variant:14s} success={rate} (n={cell.n_valid})")
        print("wrote: " + ", ".join(written))


def _cmd_motiv(args) -> int:
    config = _load_bench_config(args.config, args.workers)
    report = run_motivating(config, n=args.n)
    import os

    os.makedirs(config.output_dir, exist_ok=True)
    out_path = os.path.join(config.output_dir, "motivating.json")
    with open(out_path, "w") as fh:
        fh.write(report.to_json())
    if args.json:
        print(report.to_json())
    else:
        print(
            f"refine-only median p={report.arm_a_median_p:.3g}, "
            f"freq-recon median p={report.arm_b_median_p:.3g}, "
            f"wilcoxon one-sided p={report.wilcoxon_p_one_sided}"
        )
        print(f"wrote: {out_path}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "keygen":
            return _cmd_keygen(args)
        if args.command == "embed":
            return _cmd_embed(args)
        if args.command == "detect":
            return _cmd_detect(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "attack":
            return _cmd_attack(args, parser)
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "ablate":
            return _cmd_ablate(args)
        if args.command == "motiv":
            return _cmd_motiv(args)
        parser.error(f"unknown command {args.command!r}")
    except WmlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
