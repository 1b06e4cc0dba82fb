"""Fidelity metrics and the statistical tests used by the evaluation harness."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from skimage.metrics import structural_similarity

from .errors import GeometryError
from .imagecore import ColorImage, luminance, rgb_to_ycbcr

PSNR_CAP_DB = 99.0
_IDENTICAL_EPS = 1e-12

# Original SSIM parameters (Wang et al.): 11x11 gaussian window, sigma 1.5.
_SSIM_KW = dict(
    win_size=11,
    gaussian_weights=True,
    sigma=1.5,
    use_sample_covariance=False,
    K1=0.01,
    K2=0.03,
    data_range=1.0,
)


@dataclass(frozen=True)
class QualityReport:
    psnr: float
    ssim: float
    ssim_lum: float


def _as_rgb_array(img: ColorImage) -> np.ndarray:
    if img.space == "ycbcr":
        from .imagecore import ycbcr_to_rgb

        img = ycbcr_to_rgb(img)
    return img.to_array()


def _check_dims(a: ColorImage, b: ColorImage) -> None:
    if (a.height, a.width) != (b.height, b.width):
        raise GeometryError(
            f"image dimensions differ: {(a.height, a.width)} vs {(b.height, b.width)}"
        )


def psnr(a: ColorImage, b: ColorImage) -> float:
    """10*log10(1/MSE) over all RGB samples, peak 1.0; identical images cap at 99 dB."""
    _check_dims(a, b)
    x = _as_rgb_array(a)
    y = _as_rgb_array(b)
    diff = x - y
    if np.max(np.abs(diff)) < _IDENTICAL_EPS:
        return PSNR_CAP_DB
    mse = float(np.mean(diff * diff))
    return 10.0 * math.log10(1.0 / mse)


def ssim(a: ColorImage, b: ColorImage) -> float:
    """Mean SSIM over the three RGB channels."""
    _check_dims(a, b)
    _check_window(a)
    x = _as_rgb_array(a)
    y = _as_rgb_array(b)
    vals = [structural_similarity(x[:, :, c], y[:, :, c], **_SSIM_KW) for c in range(3)]
    return float(np.mean(vals))


def ssim_lum(a: ColorImage, b: ColorImage) -> float:
    """SSIM on the luminance plane only; exact 1.0 whenever Y planes match."""
    _check_dims(a, b)
    _check_window(a)
    return float(structural_similarity(luminance(a), luminance(b), **_SSIM_KW))


def _check_window(img: ColorImage) -> None:
    if min(img.height, img.width) < _SSIM_KW["win_size"]:
        raise GeometryError(
            f"image smaller than the {_SSIM_KW['win_size']}x{_SSIM_KW['win_size']} SSIM window"
        )


def quality_report(a: ColorImage, b: ColorImage) -> QualityReport:
    return QualityReport(psnr=psnr(a, b), ssim=ssim(a, b), ssim_lum=ssim_lum(a, b))


def binom_tail_p(k: int, n: int) -> float:
    """Exact P(X >= k) for X ~ Binomial(n, 1/2), integer arithmetic throughout."""
    if not (0 <= n <= 64):
        raise ValueError(f"n must be in [0, 64], got {n}")
    if k < 0:
        return 1.0
    if k > n:
        raise ValueError(f"k={k} exceeds n={n}")
    total = sum(math.comb(n, i) for i in range(k, n + 1))
    return total / (1 << n)


def binom_pmf(k: int, n: int) -> float:
    """Exact P(X = k) for X ~ Binomial(n, 1/2)."""
    if not (0 <= k <= n <= 64):
        raise ValueError("require 0 <= k <= n <= 64")
    return math.comb(n, k) / (1 << n)


_EXACT_WILCOXON_MAX_N = 25


def _signed_rank_stat(diffs: np.ndarray) -> tuple[float, np.ndarray]:
    """W+ and the midranks (of |d|) for the nonzero differences."""
    absd = np.abs(diffs)
    order = np.argsort(absd, kind="stable")
    ranks = np.empty(len(diffs))
    sorted_abs = absd[order]
    i = 0
    rank = 1
    while i < len(sorted_abs):
        j = i
        while j + 1 < len(sorted_abs) and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        mid = (rank + rank + (j - i)) / 2.0
        ranks[order[i : j + 1]] = mid
        rank += j - i + 1
        i = j + 1
    w_plus = float(np.sum(ranks[diffs > 0]))
    return w_plus, ranks


def _exact_signed_rank_dist(ranks2: np.ndarray) -> np.ndarray:
    """Counts of each achievable doubled W+ over all 2^n sign assignments."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in ranks2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(
    x: np.ndarray, y: np.ndarray, alternative: str = "two_sided"
) -> float:
    """Wilcoxon signed-rank p-value for paired samples.

    Exact null distribution (dynamic programming over 2^n sign patterns) for
    n <= 25 nonzero differences; normal approximation with tie correction and
    a 0.5 continuity correction beyond that. `alternative` is "two_sided"
    (median difference nonzero) or "greater" (median of x - y positive).
    """
    if alternative not in ("two_sided", "greater"):
        raise ValueError(f"unknown alternative {alternative!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    diffs = x - y
    diffs = diffs[diffs != 0]
    n = len(diffs)
    if n == 0:
        raise ValueError("all paired differences are zero")
    if n < 5:
        raise ValueError(f"need >= 5 nonzero differences, got {n}")
    w_plus, ranks = _signed_rank_stat(diffs)
    if n <= _EXACT_WILCOXON_MAX_N:
        ranks2 = np.rint(ranks * 2).astype(np.int64)
        counts = _exact_signed_rank_dist(ranks2)
        w2 = int(round(w_plus * 2))
        denom = 1 << n
        p_ge = int(sum(counts[w2:])) / denom
        if alternative == "greater":
            return p_ge
        p_le = int(sum(counts[: w2 + 1])) / denom
        return min(1.0, 2.0 * min(p_ge, p_le))
    mean = n * (n + 1) / 4.0
    # Var(W+) = sum(r_i^2)/4; midranks make this the tie-corrected variance
    var = float(np.sum(ranks**2)) / 4.0
    sd = math.sqrt(var)
    if alternative == "greater":
        z = (w_plus - mean - 0.5) / sd
        return _norm_sf(z)
    z = (abs(w_plus - mean) - 0.5) / sd
    return min(1.0, 2.0 * _norm_sf(z))


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def attack_success(report) -> bool:
    """An attack succeeded when the detector no longer fires."""
    return not report.detected
