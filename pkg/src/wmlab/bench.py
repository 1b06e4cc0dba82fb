"""Dataset ingestion, benchmark matrices, the motivating-experiment preset,
and report emission (CSV / JSONL / Markdown)."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .attack import (
    PipelineConfig,
    ProjectionParams,
    RefinerSpec,
    load_model,
    run_pipeline,
)
from .errors import BenchConfigError, WmlabError
from .imagecore import ColorImage, load_image
from .metrics import QualityReport, quality_report, wilcoxon_signed_rank
from .watermarks import (
    DetectionPolicy,
    DetectionReport,
    detect_dwtdct,
    detect_dwtdctsvd,
    detect_ring,
    embed_dwtdct,
    embed_dwtdctsvd,
    embed_ring,
    make_bit_key,
    make_ring_key,
)

log = logging.getLogger(__name__)

SCHEMES = ("dwtdct", "dwtdctsvd", "ring")
CSV_COLUMNS = (
    "image_id",
    "scheme",
    "variant",
    "pre_bits",
    "pre_p",
    "post_bits",
    "post_p",
    "success",
    "psnr",
    "ssim",
    "ssim_lum",
    "t_stage1_ms",
    "t_stage2_ms",
    "t_stage3_ms",
)

_INGEST_TAG = 0x1C9E57

ABLATION_VARIANTS = (
    ("freq", True, False, False),
    ("refine", False, True, False),
    ("freq+color", True, False, True),
    ("freq+refine", True, True, False),
    ("full", True, True, True),
)


@dataclass(frozen=True)
class VariantSpec:
    name: str
    freq_recon: bool
    sem_refine: bool
    color_corr: bool

    def __post_init__(self):
        if not (self.freq_recon or self.sem_refine or self.color_corr):
            raise BenchConfigError(f"variant {self.name!r} enables no stage")


@dataclass(frozen=True)
class BenchConfig:
    dataset_dir: str
    output_dir: str
    limit: int = 100
    schemes: tuple[str, ...] = SCHEMES
    variants: tuple[VariantSpec, ...] = (VariantSpec("full", True, True, True),)
    master_seed: int = 0
    formats: tuple[str, ...] = ("csv", "jsonl", "markdown")
    model_path: str | None = None
    stage1_mode: str = "model"  # "model" | "projection"
    refiner: RefinerSpec = field(default_factory=RefinerSpec)
    null_samples: int = 199
    timing_mode: str = "wall"  # "wall" | "none"
    workers: int = 1

    def validate(self) -> None:
        if self.limit < 1:
            raise BenchConfigError("limit must be >= 1")
        if not self.variants:
            raise BenchConfigError("at least one pipeline variant is required")
        unknown = set(self.schemes) - set(SCHEMES)
        if unknown:
            raise BenchConfigError(f"unknown schemes: {sorted(unknown)}")
        if self.stage1_mode not in ("model", "projection"):
            raise BenchConfigError(f"unknown stage1_mode {self.stage1_mode!r}")
        if self.timing_mode not in ("wall", "none"):
            raise BenchConfigError(f"unknown timing_mode {self.timing_mode!r}")
        needs_model = any(v.freq_recon for v in self.variants) and self.stage1_mode == "model"
        if needs_model and not self.model_path:
            raise BenchConfigError("variants use freq_recon but no model_path given")
        if self.workers < 1:
            raise BenchConfigError("workers must be >= 1")


def bench_config_from_json(text: str) -> BenchConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BenchConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        variants = tuple(
            VariantSpec(
                name=v["name"],
                freq_recon=bool(v.get("freq_recon", False)),
                sem_refine=bool(v.get("sem_refine", False)),
                color_corr=bool(v.get("color_corr", False)),
            )
            for v in doc.get("variants", [{"name": "full", "freq_recon": True, "sem_refine": True, "color_corr": True}])
        )
        refiner_doc = doc.get("refiner", {})
        refiner = RefinerSpec(
            kind=refiner_doc.get("kind", "builtin"),
            tv_weight=float(refiner_doc.get("tv_weight", 0.08)),
            iterations=int(refiner_doc.get("iterations", 120)),
            command_template=refiner_doc.get("command_template"),
            strength=float(refiner_doc.get("strength", 0.3)),
            timeout_s=float(refiner_doc.get("timeout_s", 300.0)),
        )
        config = BenchConfig(
            dataset_dir=doc["dataset_dir"],
            output_dir=doc["output_dir"],
            limit=int(doc.get("limit", 100)),
            schemes=tuple(doc.get("schemes", list(SCHEMES))),
            variants=variants,
            master_seed=int(doc.get("master_seed", 0)),
            formats=tuple(doc.get("formats", ["csv", "jsonl", "markdown"])),
            model_path=doc.get("model_path"),
            stage1_mode=doc.get("stage1_mode", "model"),
            refiner=refiner,
            null_samples=int(doc.get("null_samples", 199)),
            timing_mode=doc.get("timing_mode", "wall"),
            workers=int(doc.get("workers", 1)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise BenchConfigError(f"malformed bench config: {exc}") from exc
    config.validate()
    return config


@dataclass
class IngestResult:
    images: list[tuple[str, ColorImage]]
    skipped: list[tuple[str, str]]


def ingest_dataset(directory: str, limit: int, seed: int) -> IngestResult:
    """Seeded shuffle of the directory's PNGs, truncated to `limit`, then loaded.

    Files that fail to load are skipped with a logged reason (no backfill).
    """
    names = sorted(
        n for n in os.listdir(directory) if n.lower().endswith(".png")
    )
    if not names:
        raise BenchConfigError(f"no PNG images in {directory}")
    rng = np.random.default_rng(np.random.SeedSequence([_INGEST_TAG, seed]))
    order = rng.permutation(len(names))
    chosen = [names[i] for i in order[: max(limit, 0)]]
    images: list[tuple[str, ColorImage]] = []
    skipped: list[tuple[str, str]] = []
    for name in chosen:
        path = os.path.join(directory, name)
        try:
            images.append((os.path.splitext(name)[0], load_image(path)))
        except WmlabError as exc:
            log.warning("skipping %s: %s", name, exc)
            skipped.append((name, str(exc)))
    if not images:
        raise BenchConfigError(f"no loadable images in {directory}")
    return IngestResult(images=images, skipped=skipped)


@dataclass
class BenchRecord:
    image_id: str
    scheme: str
    variant: str
    status: str  # "ok" | "embed_failed" | "attack_error"
    pre: DetectionReport | None = None
    post: DetectionReport | None = None
    quality: QualityReport | None = None
    timings_ms: dict[str, float] = field(default_factory=dict)
    error: str | None = None

    @property
    def success(self) -> bool | None:
        if self.status != "ok" or self.post is None:
            return None
        return not self.post.detected


@dataclass
class AggregateCell:
    scheme: str
    variant: str
    n_valid: int
    n_success: int
    mean_psnr: float | None
    mean_ssim: float | None
    mean_ssim_lum: float | None

    @property
    def success_rate(self) -> float | None:
        if self.n_valid == 0:
            return None
        return self.n_success / self.n_valid


@dataclass
class BenchReport:
    records: list[BenchRecord]
    aggregates: list[AggregateCell]
    config_echo: dict
    seed: int
    version: str
    metadata: dict
    pvalues: list[dict] | None = None


def _derive_seed(master: int, *parts: str) -> int:
    digest = hashlib.sha256(("/".join(parts)).encode()).digest()
    words = [int.from_bytes(digest[i : i + 8], "big") for i in range(0, 32, 8)]
    ss = np.random.SeedSequence([master, *words])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**63))


def _embed_and_verify(img: ColorImage, image_id: str, scheme: str, config: BenchConfig):
    seed = _derive_seed(config.master_seed, image_id, scheme)
    policy = DetectionPolicy()
    if scheme == "dwtdct":
        key = make_bit_key(seed)
        wm = embed_dwtdct(img, key)
        pre = detect_dwtdct(wm, key, policy)
    elif scheme == "dwtdctsvd":
        key = make_bit_key(seed)
        wm = embed_dwtdctsvd(img, key)
        pre = detect_dwtdctsvd(wm, key, policy)
    elif scheme == "ring":
        key = make_ring_key(seed, size=min(img.height, img.width))
        wm = embed_ring(img, key)
        pre = detect_ring(wm, key, policy, null_samples=config.null_samples)
    else:
        raise BenchConfigError(f"unknown scheme {scheme!r}")
    return key, wm, pre


def _detect_post(img: ColorImage, scheme: str, key, config: BenchConfig) -> DetectionReport:
    policy = DetectionPolicy()
    if scheme == "dwtdct":
        return detect_dwtdct(img, key, policy)
    if scheme == "dwtdctsvd":
        return detect_dwtdctsvd(img, key, policy)
    return detect_ring(img, key, policy, null_samples=config.null_samples)


def _pipeline_config(config: BenchConfig, variant: VariantSpec, model) -> PipelineConfig:
    return PipelineConfig(
        freq_recon=variant.freq_recon,
        sem_refine=variant.sem_refine,
        color_corr=variant.color_corr,
        model=model if config.stage1_mode == "model" else None,
        projection=ProjectionParams() if config.stage1_mode == "projection" else None,
        refiner=config.refiner,
        master_seed=config.master_seed,
    )


def _run_image_scheme(args) -> list[BenchRecord]:
    image_id, img, scheme, config, model = args
    records: list[BenchRecord] = []
    try:
        key, wm, pre = _embed_and_verify(img, image_id, scheme, config)
    except WmlabError as exc:
        return [
            BenchRecord(image_id, scheme, v.name, "embed_failed", error=str(exc))
            for v in config.variants
        ]
    if not pre.detected:
        return [
            BenchRecord(image_id, scheme, v.name, "embed_failed", pre=pre,
                        error="pre-attack detection failed")
            for v in config.variants
        ]
    for variant in config.variants:
        try:
            report = run_pipeline(wm, _pipeline_config(config, variant, model))
            post = _detect_post(report.final, scheme, key, config)
            records.append(
                BenchRecord(
                    image_id,
                    scheme,
                    variant.name,
                    "ok",
                    pre=pre,
                    post=post,
                    quality=quality_report(report.final, wm),
                    timings_ms=dict(report.timings_ms),
                )
            )
        except WmlabError as exc:
            records.append(
                BenchRecord(image_id, scheme, variant.name, "attack_error", pre=pre, error=str(exc))
            )
    return records


def run_matrix(config: BenchConfig) -> BenchReport:
    """Embed -> verify -> attack -> detect for every (image, scheme, variant)."""
    config.validate()
    model = None
    if config.stage1_mode == "model" and any(v.freq_recon for v in config.variants):
        model = load_model(config.model_path)
    ingest = ingest_dataset(config.dataset_dir, config.limit, config.master_seed)

    tasks = [
        (image_id, img, scheme, config, model)
        for image_id, img in ingest.images
        for scheme in config.schemes
    ]
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            chunks = list(pool.map(_run_image_scheme, tasks))
    else:
        chunks = [_run_image_scheme(t) for t in tasks]
    records = [r for chunk in chunks for r in chunk]
    records.sort(key=lambda r: (r.image_id, r.scheme, r.variant))

    aggregates = _aggregate(records)
    return BenchReport(
        records=records,
        aggregates=aggregates,
        config_echo=_config_echo(config),
        seed=config.master_seed,
        version=__version__,
        metadata={
            "psnr_reference": "watermarked",
            "timing_mode": config.timing_mode,
            "skipped": ingest.skipped,
            "n_images": len(ingest.images),
        },
    )


def _aggregate(records: list[BenchRecord]) -> list[AggregateCell]:
    cells: dict[tuple[str, str], list[BenchRecord]] = {}
    for r in records:
        cells.setdefault((r.scheme, r.variant), []).append(r)
    out = []
    for (scheme, variant) in sorted(cells):
        group = cells[(scheme, variant)]
        ok = [r for r in group if r.status == "ok"]
        out.append(
            AggregateCell(
                scheme=scheme,
                variant=variant,
                n_valid=len(ok),
                n_success=sum(1 for r in ok if r.success),
                mean_psnr=_mean([r.quality.psnr for r in ok]),
                mean_ssim=_mean([r.quality.ssim for r in ok]),
                mean_ssim_lum=_mean([r.quality.ssim_lum for r in ok]),
            )
        )
    return out


def _mean(values):
    return float(statistics.fmean(values)) if values else None


def _config_echo(config: BenchConfig) -> dict:
    return {
        "dataset_dir": config.dataset_dir,
        "output_dir": config.output_dir,
        "limit": config.limit,
        "schemes": list(config.schemes),
        "variants": [
            {
                "name": v.name,
                "freq_recon": v.freq_recon,
                "sem_refine": v.sem_refine,
                "color_corr": v.color_corr,
            }
            for v in config.variants
        ],
        "master_seed": config.master_seed,
        "model_path": config.model_path,
        "stage1_mode": config.stage1_mode,
        "refiner_kind": config.refiner.kind,
        "null_samples": config.null_samples,
        "timing_mode": config.timing_mode,
    }


def run_ablation(config: BenchConfig) -> BenchReport:
    """Five-variant ablation against the ring scheme, plus per-image p-values."""
    variants = tuple(VariantSpec(n, f, s, c) for (n, f, s, c) in ABLATION_VARIANTS)
    config = replace(config, schemes=("ring",), variants=variants)
    report = run_matrix(config)
    report.pvalues = [
        {
            "image_id": r.image_id,
            "variant": r.variant,
            "p_value": r.post.p_value if r.post is not None else None,
        }
        for r in report.records
        if r.status == "ok"
    ]
    return report


@dataclass
class MotivatingReport:
    n: int
    arm_a_median_p: float
    arm_b_median_p: float
    arm_a_fraction_removed: float
    arm_b_fraction_removed: float
    wilcoxon_p_one_sided: float | None
    per_image: list[dict]
    seed: int
    version: str

    def to_json(self) -> str:
        doc = {
            "n": self.n,
            "arm_a": {
                "stage": "refine_only",
                "median_p": self.arm_a_median_p,
                "fraction_removed": self.arm_a_fraction_removed,
            },
            "arm_b": {
                "stage": "freq_recon_only",
                "median_p": self.arm_b_median_p,
                "fraction_removed": self.arm_b_fraction_removed,
            },
            "wilcoxon_one_sided_p_b_greater": self.wilcoxon_p_one_sided,
            "per_image": self.per_image,
            "seed": self.seed,
            "version": self.version,
        }
        return json.dumps(doc, indent=2)


def run_motivating(config: BenchConfig, n: int = 20) -> MotivatingReport:
    """Ring watermarks, then refine-only (arm A) vs frequency-reconstruction-only
    (arm B); reports per-arm median p-values and a one-sided Wilcoxon for B > A."""
    if n < 10:
        raise BenchConfigError(f"motivating preset needs n >= 10, got {n}")
    config.validate()
    model = None
    if config.stage1_mode == "model":
        if not config.model_path:
            raise BenchConfigError("motivating preset needs a trained model")
        model = load_model(config.model_path)
    ingest = ingest_dataset(config.dataset_dir, n, config.master_seed)
    if len(ingest.images) < 10:
        raise BenchConfigError(f"needed >= 10 loadable images, got {len(ingest.images)}")

    arm_a = VariantSpec("refine", False, True, False)
    arm_b = VariantSpec("freq", True, False, False)
    rows = []
    for image_id, img in ingest.images:
        key, wm, pre = _embed_and_verify(img, image_id, "ring", config)
        p_a = _detect_post(
            run_pipeline(wm, _pipeline_config(config, arm_a, model)).final, "ring", key, config
        ).p_value
        p_b = _detect_post(
            run_pipeline(wm, _pipeline_config(config, arm_b, model)).final, "ring", key, config
        ).p_value
        rows.append({"image_id": image_id, "pre_p": pre.p_value, "refine_p": p_a, "freq_p": p_b})

    a = np.array([r["refine_p"] for r in rows])
    b = np.array([r["freq_p"] for r in rows])
    try:
        wilcoxon_p = wilcoxon_signed_rank(b, a, alternative="greater")
    except ValueError:
        wilcoxon_p = None
    return MotivatingReport(
        n=len(rows),
        arm_a_median_p=float(np.median(a)),
        arm_b_median_p=float(np.median(b)),
        arm_a_fraction_removed=float(np.mean(a > 0.01)),
        arm_b_fraction_removed=float(np.mean(b > 0.01)),
        wilcoxon_p_one_sided=wilcoxon_p,
        per_image=rows,
        seed=config.master_seed,
        version=__version__,
    )


# --------------------------------------------------------------------------
# emission

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _record_fields(record: BenchRecord, timing_mode: str) -> dict:
    timings = record.timings_ms if timing_mode == "wall" else {}
    q = record.quality
    return {
        "image_id": record.image_id,
        "scheme": record.scheme,
        "variant": record.variant,
        "pre_bits": record.pre.bits_recovered if record.pre else None,
        "pre_p": record.pre.p_value if record.pre else None,
        "post_bits": record.post.bits_recovered if record.post else None,
        "post_p": record.post.p_value if record.post else None,
        "success": record.success,
        "psnr": q.psnr if q else None,
        "ssim": q.ssim if q else None,
        "ssim_lum": q.ssim_lum if q else None,
        "t_stage1_ms": timings.get("freq_recon"),
        "t_stage2_ms": timings.get("sem_refine"),
        "t_stage3_ms": timings.get("color_corr"),
    }


def emit_report(report: BenchReport, formats, output_dir: str) -> list[str]:
    """Write the selected formats; returns the paths written."""
    os.makedirs(output_dir, exist_ok=True)
    timing_mode = report.metadata.get("timing_mode", "wall")
    written = []
    if "csv" in formats:
        path = os.path.join(output_dir, "report.csv")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for record in report.records:
            fields = _record_fields(record, timing_mode)
            writer.writerow([_fmt(fields[c]) for c in CSV_COLUMNS])
        _write_text(path, buf.getvalue())
        written.append(path)
    if "jsonl" in formats:
        path = os.path.join(output_dir, "report.jsonl")
        lines = []
        for record in report.records:
            fields = _record_fields(record, timing_mode)
            fields["status"] = record.status
            fields["error"] = record.error
            lines.append(json.dumps(fields))
        _write_text(path, "\n".join(lines) + ("\n" if lines else ""))
        written.append(path)
    if "markdown" in formats:
        path = os.path.join(output_dir, "report.md")
        _write_text(path, _markdown_table(report))
        written.append(path)
    if report.pvalues is not None:
        path = os.path.join(output_dir, "pvalues.csv")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image_id", "variant", "p_value"])
        for row in report.pvalues:
            writer.writerow([row["image_id"], row["variant"], _fmt(row["p_value"])])
        _write_text(path, buf.getvalue())
        written.append(path)
    meta_path = os.path.join(output_dir, "run_meta.json")
    _write_text(
        meta_path,
        json.dumps(
            {
                "config": report.config_echo,
                "seed": report.seed,
                "version": report.version,
                "metadata": report.metadata,
            },
            indent=2,
        ),
    )
    written.append(meta_path)
    return written


def _write_text(path: str, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _markdown_table(report: BenchReport) -> str:
    lines = [
        "| Scheme | Variant | Attack Succ. | n | PSNR | SSIM | SSIM_lum |",
        "|---|---|---|---|---|---|---|",
    ]
    for cell in report.aggregates:
        rate = "" if cell.success_rate is None else f"{100.0 * cell.success_rate:.1f}%"
        lines.append(
            "| {} | {} | {} | {} | {} | {} | {} |".format(
                cell.scheme,
                cell.variant,
                rate,
                cell.n_valid,
                "" if cell.mean_psnr is None else f"{cell.mean_psnr:.2f}",
                "" if cell.mean_ssim is None else f"{cell.mean_ssim:.3f}",
                "" if cell.mean_ssim_lum is None else f"{cell.mean_ssim_lum:.3f}",
            )
        )
    return "\n".join(lines) + "\n"
