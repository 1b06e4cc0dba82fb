"""Protocol-conformant entry point.

Contract with the host: read an 8-bit RGB PNG from --input, write an
8-bit RGB PNG of identical dimensions to --output and exit 0, or exit
nonzero with the reason on stderr and no output file. Exit codes:
0 success, 2 usage, 3 backend/model unavailable, 4 processing failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

import numpy as np
from PIL import Image, UnidentifiedImageError

from .backends import (
    DEFAULT_DIFFUSION_MODEL,
    DEFAULT_STEPS,
    BackendUnavailable,
    diffusion,
    edge_diffuse,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BACKEND = 3
EXIT_PROCESSING = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wmlab-sd-refine",
        description="single-pass image-to-image refinement behind the wmlab refiner protocol",
    )
    parser.add_argument("--input", required=True, help="source 8-bit RGB PNG")
    parser.add_argument("--output", required=True, help="destination PNG (same dimensions)")
    parser.add_argument("--strength", type=float, default=0.3, help="edit strength in (0, 1]")
    parser.add_argument(
        "--backend",
        choices=("diffusion", "edge-diffuse"),
        default="diffusion",
        help="diffusion needs torch/diffusers plus downloadable weights; "
        "edge-diffuse is self-contained",
    )
    parser.add_argument("--model", default=DEFAULT_DIFFUSION_MODEL, help="diffusion model id")
    parser.add_argument("--steps", type=int, default=DEFAULT_STEPS, help="diffusion step count")
    parser.add_argument("--device", default=None, help="torch device override")
    parser.add_argument("--seed", type=int, default=0, help="fixed seed for determinism")
    return parser


def _load_rgb(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such input: {path}")
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"input must be 8-bit RGB, got mode {im.mode!r}")
        im.load()
        return np.asarray(im, dtype=np.float64) / 255.0


def _write_rgb_atomic(arr: np.ndarray, path: str) -> None:
    """Write via a temp file + rename so the output exists only on success."""
    quant = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(suffix=".png", dir=directory)
    os.close(fd)
    try:
        Image.fromarray(quant, mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run(args: argparse.Namespace) -> int:
    if not (0.0 < args.strength <= 1.0):
        print(f"error: strength must be in (0, 1], got {args.strength}", file=sys.stderr)
        return EXIT_USAGE
    try:
        src = _load_rgb(args.input)
    except (FileNotFoundError, ValueError, UnidentifiedImageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROCESSING

    try:
        if args.backend == "edge-diffuse":
            out = edge_diffuse(src, args.strength, args.seed)
        else:
            out = diffusion(src, args.strength, args.seed, args.model, args.steps, args.device)
    except BackendUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except MemoryError:
        print("error: out of memory during refinement", file=sys.stderr)
        return EXIT_PROCESSING
    except Exception as exc:
        print(f"error: refinement failed: {exc}", file=sys.stderr)
        return EXIT_PROCESSING

    if out.shape != src.shape:
        print(
            f"error: backend changed dimensions {src.shape} -> {out.shape}",
            file=sys.stderr,
        )
        return EXIT_PROCESSING
    try:
        _write_rgb_atomic(out, args.output)
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_PROCESSING
    return EXIT_OK


def main(argv=None) -> int:
    return run(_build_parser().parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
