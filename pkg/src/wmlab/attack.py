"""Three-stage watermark-removal pipeline and its trained frequency model.

Stage 1 multiplies every 8x8-block DCT coefficient by a learned gain and a
sigmoid-gated mask (trained on clean images corrupted with band-limited
Gaussian noise, L1 objective), or alternatively projects the luminance
spectrum onto a fitted 1/f^alpha prior. Stage 2 is a structure-preserving
denoiser (built-in total-variation descent, or any external command
implementing the subprocess protocol). Stage 3 matches per-channel mean and
std back to the original input.
"""

from __future__ import annotations

import json
import math
import os
import shlex
import subprocess
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateSpectrumError,
    GeometryError,
    PipelineConfigError,
    PipelineStageError,
    RefinerOutputError,
    RefinerProcessError,
    RefinerTimeoutError,
    TrainingDivergedError,
)
from .imagecore import (
    ColorImage,
    RasterPlane,
    channel_stats,
    load_image,
    rgb_to_ycbcr,
    save_image,
    ycbcr_to_rgb,
)
from .metrics import QualityReport, quality_report
from .spectral import (
    DctGrid,
    dct8_forward,
    dct8_inverse,
    fft_centered,
    fit_prior,
    ifft_centered,
    radial_profile,
    radius_map,
)

BAND_MIN, BAND_MAX = 0, 15
IDENTITY_THETA = 20.0  # sigmoid(20) ~ 1 - 2e-9: the practical "mask off" logit
MODEL_FORMAT_VERSION = 1

DEFAULT_TV_WEIGHT = 0.03
DEFAULT_TV_ITERATIONS = 120
DEFAULT_REFINER_TIMEOUT_S = 300.0
DEFAULT_PROJECTION_TAU = 2.0

TEMP_DIR_ENV = "WMLAB_TMPDIR"


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class BandNoiseSpec:
    """Gaussian corruption confined to DCT band t1 <= u+v < t2."""

    t1: int
    t2: int
    sigma: float

    def __post_init__(self):
        if not (BAND_MIN <= self.t1 < self.t2 <= BAND_MAX):
            raise ValueError(f"require {BAND_MIN} <= t1 < t2 <= {BAND_MAX}, got [{self.t1}, {self.t2})")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def band_mask(self) -> np.ndarray:
        uv = np.add.outer(np.arange(8), np.arange(8))
        return (uv >= self.t1) & (uv < self.t2)


def training_recipe_specs(
    bands: tuple[tuple[int, int], ...] = ((0, 5), (5, 10), (10, 15)),
    sigmas: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6),
) -> list[BandNoiseSpec]:
    """The full band x sigma grid used to train the shrinkage model."""
    return [BandNoiseSpec(t1, t2, s) for (t1, t2) in bands for s in sigmas]


@dataclass(frozen=True)
class FrequencyMask:
    """Sigmoid-gated 8x8 mask; theta is shared across all samples."""

    theta: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.theta, dtype=np.float64)
        if arr.shape != (8, 8):
            raise ValueError(f"theta must be 8x8, got {arr.shape}")
        object.__setattr__(self, "theta", arr)

    def values(self) -> np.ndarray:
        return _sigmoid(self.theta)


@dataclass(frozen=True)
class ShrinkageModel:
    """Per-coefficient multiplicative denoiser: coefficient * gain * mask."""

    gains: np.ndarray
    mask: FrequencyMask
    bands: tuple[tuple[int, int], ...]
    sigmas: tuple[float, ...]
    seed: int
    epochs: int
    final_loss: float

    def __post_init__(self):
        arr = np.asarray(self.gains, dtype=np.float64)
        if arr.shape != (8, 8):
            raise ValueError(f"gains must be 8x8, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("gains must be finite")
        object.__setattr__(self, "gains", arr)

    def combined(self) -> np.ndarray:
        """Effective per-coefficient multiplier applied at inference."""
        return self.gains * self.mask.values()

    @classmethod
    def identity(cls) -> "ShrinkageModel":
        return cls(
            gains=np.ones((8, 8)),
            mask=FrequencyMask(np.full((8, 8), IDENTITY_THETA)),
            bands=(),
            sigmas=(),
            seed=0,
            epochs=0,
            final_loss=0.0,
        )


def model_to_json(model: ShrinkageModel) -> str:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "gains": [float(v) for v in model.gains.ravel()],
        "theta": [float(v) for v in model.mask.theta.ravel()],
        "bands": [list(b) for b in model.bands],
        "sigmas": list(model.sigmas),
        "seed": model.seed,
        "epochs": model.epochs,
        "final_loss": model.final_loss,
    }
    return json.dumps(doc, indent=2)


def model_from_json(text: str) -> ShrinkageModel:
    doc = json.loads(text)
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {doc.get('format_version')!r}")
    return ShrinkageModel(
        gains=np.array(doc["gains"]).reshape(8, 8),
        mask=FrequencyMask(np.array(doc["theta"]).reshape(8, 8)),
        bands=tuple(tuple(b) for b in doc["bands"]),
        sigmas=tuple(doc["sigmas"]),
        seed=int(doc["seed"]),
        epochs=int(doc["epochs"]),
        final_loss=float(doc["final_loss"]),
    )


def save_model(model: ShrinkageModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(model_to_json(model))


def load_model(path) -> ShrinkageModel:
    with open(path) as fh:
        return model_from_json(fh.read())


# --------------------------------------------------------------------------
# corruption + training

def corrupt_band_noise(grid: DctGrid, spec: BandNoiseSpec, seed: int) -> DctGrid:
    """Add iid N(0, sigma^2) to every coefficient inside the band, all blocks."""
    mask = spec.band_mask()
    coeffs = grid.coeffs.copy()
    if spec.sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(coeffs.shape) * spec.sigma
        coeffs[..., mask] += noise[..., mask]
    return DctGrid(coeffs=coeffs, height=grid.height, width=grid.width)


def _luminance_blocks(images) -> np.ndarray:
    """DCT coefficients of every 8x8 luminance block, stacked (n, 8, 8)."""
    banks = []
    for img in images:
        y = rgb_to_ycbcr(img).planes[0] if img.space == "rgb" else img.planes[0]
        grid = dct8_forward(y)
        banks.append(grid.coeffs.reshape(-1, 8, 8))
    return np.concatenate(banks, axis=0)


def _corrupted_eval_set(blocks: np.ndarray, specs, seed: int):
    """Fixed corrupted copies of the held-out blocks, cycling the spec list."""
    rng = np.random.default_rng(seed)
    spec_idx = np.arange(len(blocks)) % len(specs)
    noisy = blocks.copy()
    for si, spec in enumerate(specs):
        rows = spec_idx == si
        if spec.sigma > 0 and rows.any():
            noise = rng.standard_normal((int(rows.sum()), 8, 8)) * spec.sigma
            noisy[rows] += noise * spec.band_mask()
    return noisy


def _l1_loss(clean: np.ndarray, noisy: np.ndarray, gains: np.ndarray, mask_vals: np.ndarray) -> float:
    return float(np.mean(np.abs(gains * mask_vals * noisy - clean)))


def train_shrinkage(
    clean_images,
    specs,
    epochs: int = 200,
    learn_rate: float = 0.05,
    seed: int = 0,
    samples_per_epoch: int = 20000,
    batch_size: int = 250,
    lr_decay: float = 0.99,
    eval_every: int = 10,
) -> ShrinkageModel:
    """Stochastic subgradient descent on gains and mask logits, L1 objective.

    Each epoch draws `samples_per_epoch` corrupted blocks (cycling the spec
    list) and consumes them in minibatches. A held-out image split is
    corrupted once (fixed noise) and used to track the best parameters seen;
    the identity model is always a candidate, so the returned model never
    scores worse than identity on the held-out set. Deterministic given the
    seed.
    """
    clean_images = list(clean_images)
    if len(clean_images) < 20:
        raise ValueError(f"need at least 20 clean images, got {len(clean_images)}")
    specs = list(specs)
    if not specs:
        raise ValueError("need at least one corruption spec")

    split_rng = np.random.default_rng(np.random.SeedSequence([0xD47A, seed]))
    order = split_rng.permutation(len(clean_images))
    n_holdout = max(1, int(round(0.15 * len(clean_images))))
    holdout_imgs = [clean_images[i] for i in order[:n_holdout]]
    train_imgs = [clean_images[i] for i in order[n_holdout:]]

    bank = _luminance_blocks(train_imgs)
    held_clean = _luminance_blocks(holdout_imgs)
    held_noisy = _corrupted_eval_set(held_clean, specs, seed=int(order[0]) + seed + 1)

    sigma_masks = np.stack([s.band_mask() * s.sigma for s in specs])
    spec_cycle = np.arange(samples_per_epoch) % len(specs)

    gains = np.ones((8, 8))
    theta = np.full((8, 8), 3.0)

    identity_loss = _l1_loss(held_clean, held_noisy, np.ones((8, 8)), np.ones((8, 8)))
    best = (identity_loss, np.ones((8, 8)), np.full((8, 8), IDENTITY_THETA))

    rng = np.random.default_rng(np.random.SeedSequence([0x7EA1, seed]))
    lr = learn_rate
    for epoch in range(epochs):
        idx = rng.integers(0, len(bank), size=samples_per_epoch)
        clean = bank[idx]
        noisy = clean + rng.standard_normal(clean.shape) * sigma_masks[spec_cycle]
        for start in range(0, samples_per_epoch, batch_size):
            cb = clean[start : start + batch_size]
            nb = noisy[start : start + batch_size]
            mask_vals = _sigmoid(theta)
            resid = gains * mask_vals * nb - cb
            if not np.all(np.isfinite(resid)):
                partial = ShrinkageModel(
                    gains=best[1], mask=FrequencyMask(best[2]),
                    bands=tuple((s.t1, s.t2) for s in specs),
                    sigmas=tuple(s.sigma for s in specs),
                    seed=seed, epochs=epoch, final_loss=best[0],
                )
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch}", last_model=partial
                )
            sy_mean = np.mean(np.sign(resid) * nb, axis=0)
            gains = gains - lr * sy_mean * mask_vals
            theta = np.clip(
                theta - lr * sy_mean * gains * mask_vals * (1.0 - mask_vals), -30.0, 30.0
            )
        lr *= lr_decay

        if (epoch + 1) % eval_every == 0 or epoch == epochs - 1:
            held_loss = _l1_loss(held_clean, held_noisy, gains, _sigmoid(theta))
            if held_loss < best[0]:
                best = (held_loss, gains.copy(), theta.copy())

    return ShrinkageModel(
        gains=best[1],
        mask=FrequencyMask(best[2]),
        bands=tuple((s.t1, s.t2) for s in specs),
        sigmas=tuple(s.sigma for s in specs),
        seed=seed,
        epochs=epochs,
        final_loss=best[0],
    )


def holdout_l1_loss(model: ShrinkageModel, clean_images, specs, seed: int = 12345) -> float:
    """L1 reconstruction loss of a model on freshly corrupted blocks."""
    blocks = _luminance_blocks(list(clean_images))
    noisy = _corrupted_eval_set(blocks, list(specs), seed=seed)
    return _l1_loss(blocks, noisy, model.gains, model.mask.values())


# --------------------------------------------------------------------------
# stage 1: frequency reconstruction

def apply_freq_recon(img: ColorImage, model: ShrinkageModel) -> ColorImage:
    """Per YCbCr channel: blockwise DCT -> gain*mask multiply -> inverse."""
    combined = model.combined()
    ycc = rgb_to_ycbcr(img) if img.space == "rgb" else img
    out_planes = []
    for plane in ycc.planes:
        grid = dct8_forward(plane)
        filtered = type(grid)(coeffs=grid.coeffs * combined, height=grid.height, width=grid.width)
        out_planes.append(dct8_inverse(filtered))
    out = ColorImage(tuple(out_planes), "ycbcr")
    return ycbcr_to_rgb(out) if img.space == "rgb" else out


def spectral_projection(
    img: ColorImage,
    alpha_override: float | None = None,
    tau: float = DEFAULT_PROJECTION_TAU,
    n_bins: int = 32,
) -> ColorImage:
    """Project the luminance spectrum onto the fitted 1/f^alpha prior.

    Annuli whose mean power exceeds tau x the prior prediction are rescaled
    down to the prediction; phases are untouched. The prior is refit without
    the offending annuli so a single spike cannot drag its own target up.
    """
    if tau <= 1.0:
        raise ValueError("tau must exceed 1")
    ycc = rgb_to_ycbcr(img) if img.space == "rgb" else img
    y = ycc.planes[0]
    spec = fft_centered(y)
    profile = radial_profile(spec, n_bins=n_bins)
    positive = (profile.powers > 0) & (profile.counts > 0)
    if positive.sum() < 2:
        # flat/degenerate spectrum: nothing exceeds any prior; leave untouched
        return img

    exclude = np.zeros(len(profile.powers), dtype=bool)
    prior = None
    for _ in range(4):
        sub_powers = np.where(exclude, 0.0, profile.powers)
        sub = type(profile)(
            bin_edges=profile.bin_edges,
            freqs=profile.freqs,
            powers=sub_powers,
            counts=profile.counts,
        )
        try:
            prior = fit_prior(sub, alpha_override=alpha_override)
        except DegenerateSpectrumError:
            break
        pred = prior.predict(profile.freqs)
        flagged = positive & (profile.powers > tau * pred)
        if np.array_equal(flagged, exclude):
            break
        exclude = flagged
    if prior is None or not exclude.any():
        return img

    pred = prior.predict(profile.freqs)
    vals = spec.values.copy()
    r = radius_map(vals.shape)
    edges = profile.bin_edges
    idx = np.searchsorted(edges, r, side="left") - 1
    for b in np.nonzero(exclude)[0]:
        members = (idx == b) & (r > 0)
        scale = math.sqrt(pred[b] / profile.powers[b])
        vals[members] *= scale
    y_out = ifft_centered(type(spec)(vals))
    out = ColorImage((y_out, ycc.planes[1], ycc.planes[2]), "ycbcr")
    return ycbcr_to_rgb(out) if img.space == "rgb" else out


# --------------------------------------------------------------------------
# stage 2: refinement

@dataclass(frozen=True)
class RefinerSpec:
    """Built-in TV denoiser or an external subprocess refiner.

    External command templates must contain `{input}` and `{output}`
    placeholders; `{strength}` is substituted when present.
    """

    kind: str = "builtin"
    tv_weight: float = DEFAULT_TV_WEIGHT
    iterations: int = DEFAULT_TV_ITERATIONS
    command_template: str | None = None
    strength: float = 0.3
    timeout_s: float = DEFAULT_REFINER_TIMEOUT_S

    def __post_init__(self):
        if self.kind not in ("builtin", "external"):
            raise ValueError(f"unknown refiner kind {self.kind!r}")
        if self.kind == "external":
            if not self.command_template:
                raise ValueError("external refiner needs a command template")
            if "{input}" not in self.command_template or "{output}" not in self.command_template:
                raise ValueError("command template must contain {input} and {output}")
        elif self.tv_weight < 0 or self.iterations < 0:
            raise ValueError("tv_weight and iterations must be >= 0")


@dataclass
class RefineOutcome:
    image: ColorImage
    stderr: str | None = None


def _tv_value(arr: np.ndarray) -> float:
    dx = np.diff(arr, axis=1)
    dy = np.diff(arr, axis=0)
    return float(np.sum(np.abs(dx)) + np.sum(np.abs(dy)))


def total_variation(img: ColorImage) -> float:
    return sum(_tv_value(p.data) for p in img.planes)


def _tv_denoise_plane(x: np.ndarray, weight: float, iterations: int) -> np.ndarray:
    """Gradient descent on 0.5|z - x|^2 + weight * TV_eps(z), fixed step count."""
    if weight == 0.0 or iterations == 0:
        return x.copy()
    eps = 0.05
    step = 1.0 / (1.0 + 8.0 * weight / eps)
    z = x.copy()
    for _ in range(iterations):
        dx = np.zeros_like(z)
        dy = np.zeros_like(z)
        dx[:, :-1] = z[:, 1:] - z[:, :-1]
        dy[:-1, :] = z[1:, :] - z[:-1, :]
        mag = np.sqrt(dx * dx + dy * dy + eps * eps)
        px = dx / mag
        py = dy / mag
        div = np.zeros_like(z)
        div[:, :-1] += px[:, :-1]
        div[:, 1:] -= px[:, :-1]
        div[:-1, :] += py[:-1, :]
        div[1:, :] -= py[:-1, :]
        grad = (z - x) - weight * div
        z -= step * grad
    return z


def _refine_builtin(img: ColorImage, spec: RefinerSpec) -> ColorImage:
    planes = tuple(
        RasterPlane(_tv_denoise_plane(p.data, spec.tv_weight, spec.iterations))
        for p in img.planes
    )
    return ColorImage(planes, img.space)


def _temp_base() -> str | None:
    return os.environ.get(TEMP_DIR_ENV) or None


def _refine_external(img: ColorImage, spec: RefinerSpec) -> RefineOutcome:
    rgb = img if img.space == "rgb" else ycbcr_to_rgb(img)
    with tempfile.TemporaryDirectory(prefix="wmlab-refine-", dir=_temp_base()) as tmp:
        in_path = os.path.join(tmp, "input.png")
        out_path = os.path.join(tmp, "output.png")
        save_image(rgb, in_path)
        argv = [
            tok.format(input=in_path, output=out_path, strength=spec.strength)
            for tok in shlex.split(spec.command_template)
        ]
        try:
            proc = subprocess.run(
                argv, capture_output=True, text=True, timeout=spec.timeout_s
            )
        except subprocess.TimeoutExpired as exc:
            raise RefinerTimeoutError(
                f"refiner exceeded {spec.timeout_s}s: {argv[0]}"
            ) from exc
        except OSError as exc:
            raise RefinerProcessError(f"cannot launch refiner {argv[0]!r}: {exc}") from exc
        if proc.returncode != 0:
            raise RefinerProcessError(
                f"refiner exited {proc.returncode}; stderr: {proc.stderr.strip()[:2000]}"
            )
        if not os.path.exists(out_path):
            raise RefinerOutputError("refiner exited 0 but wrote no output image")
        refined = load_image(out_path)
        if (refined.height, refined.width) != (img.height, img.width):
            raise RefinerOutputError(
                f"refiner changed dimensions: {(refined.height, refined.width)} "
                f"vs {(img.height, img.width)}"
            )
        out = refined if img.space == "rgb" else rgb_to_ycbcr(refined)
        return RefineOutcome(image=out, stderr=proc.stderr or None)


def refine(img: ColorImage, spec: RefinerSpec) -> ColorImage:
    return refine_detailed(img, spec).image


def refine_detailed(img: ColorImage, spec: RefinerSpec) -> RefineOutcome:
    if spec.kind == "builtin":
        return RefineOutcome(image=_refine_builtin(img, spec))
    return _refine_external(img, spec)


# --------------------------------------------------------------------------
# stage 3: color correction

def color_correct(reference: ColorImage, candidate: ColorImage) -> ColorImage:
    """Per-channel affine map matching the candidate's mean/std to the reference."""
    if (reference.height, reference.width) != (candidate.height, candidate.width):
        raise GeometryError("reference and candidate dimensions differ")
    ref = reference if reference.space == "rgb" else ycbcr_to_rgb(reference)
    cand = candidate if candidate.space == "rgb" else ycbcr_to_rgb(candidate)
    ref_stats = channel_stats(ref)
    cand_stats = channel_stats(cand)
    out = np.empty((cand.height, cand.width, 3))
    cand_arr = cand.to_array()
    for c in range(3):
        if cand_stats.std[c] < 1e-8:
            out[:, :, c] = ref_stats.mean[c]
        else:
            out[:, :, c] = (
                ref_stats.std[c]
                * (cand_arr[:, :, c] - cand_stats.mean[c])
                / cand_stats.std[c]
                + ref_stats.mean[c]
            )
    return ColorImage.from_array(out, "rgb")


# --------------------------------------------------------------------------
# pipeline

@dataclass(frozen=True)
class ProjectionParams:
    alpha_override: float | None = None
    tau: float = DEFAULT_PROJECTION_TAU


@dataclass(frozen=True)
class PipelineConfig:
    freq_recon: bool = True
    sem_refine: bool = True
    color_corr: bool = True
    model: ShrinkageModel | None = None
    projection: ProjectionParams | None = None
    refiner: RefinerSpec = field(default_factory=RefinerSpec)
    master_seed: int = 0

    def validate(self) -> None:
        if not (self.freq_recon or self.sem_refine or self.color_corr):
            raise PipelineConfigError("at least one pipeline stage must be enabled")
        if self.freq_recon and self.model is None and self.projection is None:
            raise PipelineConfigError(
                "freq_recon stage needs a shrinkage model or projection parameters"
            )


STAGE_FREQ = "freq_recon"
STAGE_REFINE = "sem_refine"
STAGE_COLOR = "color_corr"


@dataclass
class AttackReport:
    """Everything recorded for one pipeline run on one image."""

    final: ColorImage
    stage_outputs: dict[str, ColorImage]
    timings_ms: dict[str, float]
    quality: QualityReport
    refiner_stderr: str | None = None
    detections: dict[str, object] = field(default_factory=dict)


def run_pipeline(img_w: ColorImage, config: PipelineConfig) -> AttackReport:
    """Apply the enabled stages in order freq_recon -> sem_refine -> color_corr.

    Stage 3 always uses the original input as the statistics reference.
    """
    config.validate()
    current = img_w
    stage_outputs: dict[str, ColorImage] = {}
    timings: dict[str, float] = {}
    refiner_stderr = None

    if config.freq_recon:
        t0 = time.perf_counter()
        try:
            if config.model is not None:
                current = apply_freq_recon(current, config.model)
            else:
                current = spectral_projection(
                    current,
                    alpha_override=config.projection.alpha_override,
                    tau=config.projection.tau,
                )
        except Exception as exc:
            raise PipelineStageError(STAGE_FREQ, exc) from exc
        timings[STAGE_FREQ] = (time.perf_counter() - t0) * 1000.0
        stage_outputs[STAGE_FREQ] = current

    if config.sem_refine:
        t0 = time.perf_counter()
        try:
            outcome = refine_detailed(current, config.refiner)
        except Exception as exc:
            raise PipelineStageError(STAGE_REFINE, exc) from exc
        current = outcome.image
        refiner_stderr = outcome.stderr
        timings[STAGE_REFINE] = (time.perf_counter() - t0) * 1000.0
        stage_outputs[STAGE_REFINE] = current

    if config.color_corr:
        t0 = time.perf_counter()
        try:
            current = color_correct(img_w, current)
        except Exception as exc:
            raise PipelineStageError(STAGE_COLOR, exc) from exc
        timings[STAGE_COLOR] = (time.perf_counter() - t0) * 1000.0
        stage_outputs[STAGE_COLOR] = current

    final = current if current.space == "rgb" else ycbcr_to_rgb(current)
    return AttackReport(
        final=final,
        stage_outputs=stage_outputs,
        timings_ms=timings,
        quality=quality_report(final, img_w if img_w.space == "rgb" else ycbcr_to_rgb(img_w)),
        refiner_stderr=refiner_stderr,
    )
