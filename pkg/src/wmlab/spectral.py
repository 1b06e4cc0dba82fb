"""Frequency transforms and spectral statistics.

Everything uses orthonormal conventions so Parseval identities hold without
scale factors: 8x8 blockwise DCT-II, single-level Haar DWT, and a centered
2-D FFT, plus radial power profiles and 1/f^alpha prior fitting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft

from .errors import DegenerateSpectrumError, GeometryError
from .imagecore import RasterPlane

BLOCK = 8


def _pad_to_multiple(arr: np.ndarray, mult: int) -> np.ndarray:
    """Edge-replicate so both dimensions are multiples of `mult`."""
    h, w = arr.shape
    ph = (-h) % mult
    pw = (-w) % mult
    if ph == 0 and pw == 0:
        return arr
    return np.pad(arr, ((0, ph), (0, pw)), mode="edge")


@dataclass(frozen=True)
class DctGrid:
    """8x8 blockwise DCT coefficients; (block_rows, block_cols, 8, 8)."""

    coeffs: np.ndarray
    height: int  # pre-pad plane height
    width: int

    @property
    def block_rows(self) -> int:
        return self.coeffs.shape[0]

    @property
    def block_cols(self) -> int:
        return self.coeffs.shape[1]


@dataclass(frozen=True)
class SubbandSet:
    """Single-level orthonormal Haar subbands at half resolution."""

    ll: RasterPlane
    lh: RasterPlane
    hl: RasterPlane
    hh: RasterPlane
    height: int  # pre-pad plane height
    width: int


@dataclass(frozen=True)
class Spectrum:
    """Centered complex 2-D Fourier coefficients (orthonormal), DC at the array center."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise GeometryError("spectrum must be 2-D")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class RadialProfile:
    """Mean power per radial-frequency annulus, DC excluded."""

    bin_edges: np.ndarray  # (n_bins + 1,), first edge 0 (exclusive)
    freqs: np.ndarray  # (n_bins,) representative radial frequency per bin
    powers: np.ndarray  # (n_bins,) mean |coefficient|^2
    counts: np.ndarray  # (n_bins,) coefficients per bin


@dataclass(frozen=True)
class SpectralPrior:
    """Fit of log(power) = intercept - alpha * log(f)."""

    intercept: float
    alpha: float

    def predict(self, freqs: np.ndarray) -> np.ndarray:
        return np.exp(self.intercept - self.alpha * np.log(freqs))


def dct8_forward(plane: RasterPlane) -> DctGrid:
    """Orthonormal 2-D DCT-II per 8x8 block; edge-replication padding."""
    arr = _pad_to_multiple(plane.data, BLOCK)
    bh, bw = arr.shape[0] // BLOCK, arr.shape[1] // BLOCK
    blocks = arr.reshape(bh, BLOCK, bw, BLOCK).transpose(0, 2, 1, 3)
    coeffs = scipy.fft.dctn(blocks, axes=(2, 3), norm="ortho")
    return DctGrid(coeffs=coeffs, height=plane.height, width=plane.width)


def dct8_inverse(grid: DctGrid) -> RasterPlane:
    """Inverse blockwise DCT; removes padding introduced by the forward pass."""
    blocks = scipy.fft.idctn(grid.coeffs, axes=(2, 3), norm="ortho")
    bh, bw = blocks.shape[0], blocks.shape[1]
    arr = blocks.transpose(0, 2, 1, 3).reshape(bh * BLOCK, bw * BLOCK)
    return RasterPlane(arr[: grid.height, : grid.width])


def haar_dwt(plane: RasterPlane) -> SubbandSet:
    """Single-level orthonormal Haar transform; pads odd dimensions by edge replication."""
    arr = _pad_to_multiple(plane.data, 2)
    a = arr[0::2, 0::2]
    b = arr[0::2, 1::2]
    c = arr[1::2, 0::2]
    d = arr[1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a + b - c - d) / 2.0
    hl = (a - b + c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return SubbandSet(
        ll=RasterPlane(ll),
        lh=RasterPlane(lh),
        hl=RasterPlane(hl),
        hh=RasterPlane(hh),
        height=plane.height,
        width=plane.width,
    )


def haar_idwt(subbands: SubbandSet) -> RasterPlane:
    ll, lh = subbands.ll.data, subbands.lh.data
    hl, hh = subbands.hl.data, subbands.hh.data
    h2, w2 = ll.shape
    out = np.empty((h2 * 2, w2 * 2))
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2.0
    out[0::2, 1::2] = (ll + lh - hl - hh) / 2.0
    out[1::2, 0::2] = (ll - lh + hl - hh) / 2.0
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2.0
    return RasterPlane(out[: subbands.height, : subbands.width])


def fft_centered(plane: RasterPlane) -> Spectrum:
    """Orthonormal 2-D FFT with DC shifted to the array center."""
    return Spectrum(np.fft.fftshift(np.fft.fft2(plane.data, norm="ortho")))


def ifft_centered(spectrum: Spectrum) -> RasterPlane:
    vals = np.fft.ifft2(np.fft.ifftshift(spectrum.values), norm="ortho")
    return RasterPlane(vals.real)


@lru_cache(maxsize=32)
def radius_map(shape: tuple[int, int]) -> np.ndarray:
    """Radial frequency sqrt(u^2 + v^2) of every bin of a centered spectrum."""
    h, w = shape
    cy, cx = h // 2, w // 2
    yy = np.arange(h)[:, None] - cy
    xx = np.arange(w)[None, :] - cx
    return np.hypot(yy, xx)


def radial_bin_edges(shape: tuple[int, int], n_bins: int) -> np.ndarray:
    """First edge 0 (exclusive), then log-spaced edges from 1 to f_max."""
    h, w = shape
    # largest offset from the shifted center is floor(n/2) along each axis
    f_max = max(math.hypot(h // 2, w // 2), 1.0 + 1e-9)
    return np.concatenate([[0.0], np.geomspace(1.0, f_max, n_bins)])


def radial_profile(spectrum: Spectrum, n_bins: int = 32) -> RadialProfile:
    """Mean |coefficient|^2 over log-spaced annuli; the DC bin is excluded."""
    if n_bins < 4:
        raise ValueError("n_bins must be >= 4")
    r = radius_map(spectrum.shape)
    edges = radial_bin_edges(spectrum.shape, n_bins)
    power = np.abs(spectrum.values) ** 2
    # bin i covers (edges[i], edges[i+1]]; searchsorted on the open left edge
    idx = np.searchsorted(edges, r, side="left") - 1
    valid = (r > 0) & (idx >= 0) & (idx < n_bins)
    counts = np.bincount(idx[valid], minlength=n_bins)
    sums = np.bincount(idx[valid], weights=power[valid], minlength=n_bins)
    powers = np.divide(sums, counts, out=np.zeros(n_bins), where=counts > 0)
    # representative frequency: geometric center of the bin; the first bin
    # (0, 1] only ever holds radius-1 coefficients on an integer grid
    freqs = np.sqrt(edges[:-1] * edges[1:])
    freqs[0] = 1.0
    return RadialProfile(bin_edges=edges, freqs=freqs, powers=powers, counts=counts)


def fit_prior(profile: RadialProfile, alpha_override: float | None = None) -> SpectralPrior:
    """Least squares of log(power) = c - alpha*log(f) over bins with positive power.

    With `alpha_override` only the intercept is fitted.
    """
    mask = (profile.powers > 0) & (profile.counts > 0)
    if mask.sum() < 2:
        raise DegenerateSpectrumError(
            f"need >= 2 positive-power bins to fit a prior, got {int(mask.sum())}"
        )
    logf = np.log(profile.freqs[mask])
    logp = np.log(profile.powers[mask])
    if alpha_override is not None:
        return SpectralPrior(
            intercept=float(np.mean(logp + alpha_override * logf)),
            alpha=float(alpha_override),
        )
    design = np.column_stack([np.ones_like(logf), -logf])
    (c, alpha), *_ = np.linalg.lstsq(design, logp, rcond=None)
    return SpectralPrior(intercept=float(c), alpha=float(alpha))
