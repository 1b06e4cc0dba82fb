"""Watermark embedders and detectors.

Three schemes:

* ``dwtdct``    -- 32-bit payload, QIM on one mid-band DCT coefficient of
                   seed-selected 8x8 blocks of the Haar LL subband.
* ``dwtdctsvd`` -- as above, but QIM on the leading singular value of the
                   block's DCT matrix (step 8x larger), applied as a rank-1
                   update through the SVD factors.
* ``ring``      -- key-seeded complex pattern blended onto annuli of the
                   centered luminance spectrum; detection by permutation
                   test against fresh random keys.

Only the luminance plane is ever modified; chroma passes through.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
import scipy.fft

from .errors import GeometryError, KeyFormatError
from .imagecore import ColorImage, RasterPlane, rgb_to_ycbcr, ycbcr_to_rgb
from .metrics import binom_tail_p
from .spectral import Spectrum, fft_centered, haar_dwt, haar_idwt, ifft_centered

PAYLOAD_BITS = 32
QIM_COEFF = (3, 2)  # fixed mid-band coefficient inside each 8x8 LL block
DEFAULT_DELTA = 4.0 / 255.0
DEFAULT_RING_STRENGTH = 0.15
DEFAULT_RING_AMP = 0.65  # pattern rms at the outermost ring
RING_MAG_SPREAD = 0.6  # variance share of the per-coefficient |pattern|^2
MIN_NULL_SAMPLES = 199

_PERM_TAG = 0x5B10C5
_PAYLOAD_TAG = 0x9A71D0
_DITHER_TAG = 0xD17E4
_RING_FIELD_TAG = 0x212F1E
_RING_NULL_TAG = 0x4E7711
_RING_PHASE_TAG = 0x687A5E


@dataclass(frozen=True)
class BitKey:
    """Key for the 32-bit payload schemes."""

    seed: int
    payload: tuple[int, ...]
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if len(self.payload) != PAYLOAD_BITS or any(b not in (0, 1) for b in self.payload):
            raise KeyFormatError(f"payload must be {PAYLOAD_BITS} bits of 0/1")
        if self.delta <= 0:
            raise KeyFormatError("delta must be positive")


@dataclass(frozen=True)
class RingKey:
    """Key for the Fourier-ring scheme.

    ``pattern`` holds one complex base value per radius; its modulus sets the
    rms of the seeded per-coefficient pattern field expanded on that annulus.
    """

    seed: int
    radii: tuple[float, ...]
    pattern: tuple[complex, ...]
    strength: float = DEFAULT_RING_STRENGTH

    def __post_init__(self):
        if len(self.radii) != len(self.pattern) or not self.radii:
            raise KeyFormatError("radii and pattern must be equal-length and non-empty")
        if any(r2 <= r1 for r1, r2 in zip(self.radii, self.radii[1:])):
            raise KeyFormatError("radii must be strictly increasing")
        if self.strength <= 0:
            raise KeyFormatError("strength must be positive")


@dataclass(frozen=True)
class DetectionPolicy:
    bit_threshold: int = 23
    p_threshold: float = 0.01

    def __post_init__(self):
        if not (0 < self.bit_threshold <= PAYLOAD_BITS):
            raise ValueError("bit_threshold must be in (0, 32]")
        if not (0.0 < self.p_threshold < 1.0):
            raise ValueError("p_threshold must be in (0, 1)")


@dataclass(frozen=True)
class DetectionReport:
    scheme: str
    p_value: float
    detected: bool
    threshold_used: str
    bits_recovered: int | None = None
    ring_statistic: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.p_value <= 1.0):
            raise ValueError(f"p_value outside [0, 1]: {self.p_value}")


def make_bit_key(seed: int, delta: float = DEFAULT_DELTA, payload: tuple[int, ...] | None = None) -> BitKey:
    """Deterministic 32-bit key; payload drawn from the seed unless given."""
    if payload is None:
        rng = np.random.default_rng(np.random.SeedSequence([_PAYLOAD_TAG, seed]))
        payload = tuple(int(b) for b in rng.integers(0, 2, PAYLOAD_BITS))
    return BitKey(seed=seed, payload=payload, delta=delta)


def default_ring_radii(size: int) -> tuple[float, float, float]:
    nyquist = size / 2.0
    return (nyquist / 8.0, nyquist / 6.0, nyquist / 4.0)


def make_ring_key(
    seed: int,
    size: int = 256,
    radii: tuple[float, ...] | None = None,
    strength: float = DEFAULT_RING_STRENGTH,
    amp: float | tuple[float, ...] = DEFAULT_RING_AMP,
) -> RingKey:
    """Ring key whose per-coefficient pattern rms rises quadratically with
    radius up to `amp` at the outermost ring (pass a tuple for explicit
    per-radius values). Outer rings are perceptually cheaper per unit energy
    and carry most of the detection weight against 1/f spectra.
    """
    if radii is None:
        radii = default_ring_radii(size)
    if isinstance(amp, (int, float)):
        r_max = max(radii)
        amps = [float(amp) * (r / r_max) ** 2 for r in radii]
    else:
        if len(amp) != len(radii):
            raise KeyFormatError("amp tuple must match radii length")
        amps = [float(a) for a in amp]
    rng = np.random.default_rng(np.random.SeedSequence([_RING_PHASE_TAG, seed]))
    pattern = []
    for a in amps:
        phase = rng.uniform(0.0, 2.0 * math.pi)
        pattern.append(complex(a * math.cos(phase), a * math.sin(phase)))
    return RingKey(seed=seed, radii=tuple(float(r) for r in radii), pattern=tuple(pattern), strength=strength)


# --------------------------------------------------------------------------
# payload <-> hex

def payload_to_hex(payload: tuple[int, ...]) -> str:
    value = 0
    for bit in payload:
        value = (value << 1) | bit
    return f"{value:08x}"


def payload_from_hex(text: str) -> tuple[int, ...]:
    if len(text) != 8:
        raise KeyFormatError("payload hex must be 8 characters")
    value = int(text, 16)
    return tuple((value >> (PAYLOAD_BITS - 1 - i)) & 1 for i in range(PAYLOAD_BITS))


def key_to_json(key: BitKey | RingKey, scheme: str) -> str:
    if isinstance(key, BitKey):
        doc = {
            "format_version": 1,
            "scheme": scheme,
            "seed": key.seed,
            "payload_hex": payload_to_hex(key.payload),
            "delta": key.delta,
        }
    else:
        doc = {
            "format_version": 1,
            "scheme": scheme,
            "seed": key.seed,
            "radii": list(key.radii),
            "strength": key.strength,
            "pattern": [[float(v.real).hex(), float(v.imag).hex()] for v in key.pattern],
        }
    return json.dumps(doc, indent=2)


def key_from_json(text: str) -> tuple[BitKey | RingKey, str]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise KeyFormatError(f"key document is not valid JSON: {exc}") from exc
    try:
        scheme = doc["scheme"]
        if scheme in ("dwtdct", "dwtdctsvd"):
            key: BitKey | RingKey = BitKey(
                seed=int(doc["seed"]),
                payload=payload_from_hex(doc["payload_hex"]),
                delta=float(doc["delta"]),
            )
        elif scheme == "ring":
            key = RingKey(
                seed=int(doc["seed"]),
                radii=tuple(float(r) for r in doc["radii"]),
                pattern=tuple(
                    complex(float.fromhex(re), float.fromhex(im)) for re, im in doc["pattern"]
                ),
                strength=float(doc["strength"]),
            )
        else:
            raise KeyFormatError(f"unknown scheme {scheme!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise KeyFormatError(f"malformed key document: {exc}") from exc
    return key, scheme


# --------------------------------------------------------------------------
# QIM primitives

def _qim_quantize(value: float, step: float, bit: int) -> float:
    m = round(value / step)
    if m % 2 != bit:
        if m == 0:
            m = 1 if value >= 0 else -1
        else:
            lo, hi = m - 1, m + 1
            m = lo if abs(value - lo * step) <= abs(value - hi * step) else hi
    return m * step


def _qim_decode(values: np.ndarray, step: float) -> np.ndarray:
    """Decode bits after grid-searching the lattice offset over one step.

    The offset minimizing the total squared quantization residual maps any
    global additive shift of the coefficients back onto the lattice, which
    keeps the detector conservative (attacker-favorable errors avoided).
    Candidates span (-step/2, step/2] with 0 first: shifts of half a step or
    more are inherently parity-ambiguous, so parity stays anchored at zero.
    """
    grid = (np.arange(1, 64) / 64.0 - 0.5) * step
    offsets = np.concatenate([[0.0], grid[grid != 0.0]])
    shifted = values[None, :] - offsets[:, None]
    resid = shifted - np.round(shifted / step) * step
    best = int(np.argmin(np.sum(resid * resid, axis=1)))
    m = np.round((values - offsets[best]) / step).astype(np.int64)
    return np.mod(m, 2)


# --------------------------------------------------------------------------
# shared luminance-plane plumbing

def _split_luminance(img: ColorImage):
    ycc = img if img.space == "ycbcr" else rgb_to_ycbcr(img)
    return ycc.planes[0].data, ycc.planes[1], ycc.planes[2]


def _merge_luminance(y: np.ndarray, cb, cr, out_space: str) -> ColorImage:
    ycc = ColorImage((RasterPlane(y), cb, cr), "ycbcr")
    return ycc if out_space == "ycbcr" else ycbcr_to_rgb(ycc)


def _bit_blocks(y_shape: tuple[int, int], seed: int) -> list[tuple[int, int]]:
    """Row/col offsets of the 32 seed-selected 8x8 blocks in the LL subband."""
    ll_h = (y_shape[0] + 1) // 2
    ll_w = (y_shape[1] + 1) // 2
    nb_r, nb_c = ll_h // 8, ll_w // 8
    if min(y_shape) < 128 or nb_r * nb_c < PAYLOAD_BITS:
        raise GeometryError(
            f"image {y_shape} too small to host {PAYLOAD_BITS} watermark blocks"
        )
    rng = np.random.default_rng(np.random.SeedSequence([_PERM_TAG, seed]))
    chosen = rng.permutation(nb_r * nb_c)[:PAYLOAD_BITS]
    return [(int(i // nb_c) * 8, int(i % nb_c) * 8) for i in chosen]


_GRID_RELEASE_STD = 0.0036  # detail-subband dither under each carrier block


def _embed_bits(img: ColorImage, key: BitKey, svd_mode: bool) -> ColorImage:
    y, cb, cr = _split_luminance(img)
    blocks = _bit_blocks(y.shape, key.seed)
    sub = haar_dwt(RasterPlane(y))
    ll = sub.ll.data.copy()
    details = [sub.lh.data.copy(), sub.hl.data.copy(), sub.hh.data.copy()]
    dither_rng = np.random.default_rng(np.random.SeedSequence([_DITHER_TAG, key.seed]))
    for (r0, c0), bit in zip(blocks, key.payload):
        block = ll[r0 : r0 + 8, c0 : c0 + 8]
        coeffs = scipy.fft.dctn(block, norm="ortho")
        if svd_mode:
            u, s, vt = np.linalg.svd(coeffs)
            target = _qim_quantize(s[0], key.delta * 8.0, bit)
            coeffs = coeffs + (target - s[0]) * np.outer(u[:, 0], vt[0])
        else:
            coeffs[QIM_COEFF] = _qim_quantize(coeffs[QIM_COEFF], key.delta, bit)
        ll[r0 : r0 + 8, c0 : c0 + 8] = scipy.fft.idctn(coeffs, norm="ortho")
        # seeded dither in the detail subbands (exactly orthogonal to LL)
        # releases the carrier pixels from the 8-bit grid, so save-time
        # rounding cannot swallow the much thinner per-pixel QIM perturbation
        for band in details:
            band[r0 : r0 + 8, c0 : c0 + 8] += (
                dither_rng.standard_normal((8, 8)) * _GRID_RELEASE_STD
            )
    dithered = replace(
        sub,
        ll=RasterPlane(ll),
        lh=RasterPlane(details[0]),
        hl=RasterPlane(details[1]),
        hh=RasterPlane(details[2]),
    )
    y_out = haar_idwt(dithered).data
    return _merge_luminance(y_out, cb, cr, img.space)


def _recover_bit_values(img: ColorImage, key: BitKey, svd_mode: bool) -> np.ndarray:
    y, _, _ = _split_luminance(img)
    blocks = _bit_blocks(y.shape, key.seed)
    ll = haar_dwt(RasterPlane(y)).ll.data
    values = np.empty(PAYLOAD_BITS)
    for i, (r0, c0) in enumerate(blocks):
        coeffs = scipy.fft.dctn(ll[r0 : r0 + 8, c0 : c0 + 8], norm="ortho")
        if svd_mode:
            values[i] = np.linalg.svd(coeffs, compute_uv=False)[0]
        else:
            values[i] = coeffs[QIM_COEFF]
    return values


def embed_dwtdct(img: ColorImage, key: BitKey) -> ColorImage:
    return _embed_bits(img, key, svd_mode=False)


def embed_dwtdctsvd(img: ColorImage, key: BitKey) -> ColorImage:
    return _embed_bits(img, key, svd_mode=True)


def _detect_bits(img: ColorImage, key: BitKey, policy: DetectionPolicy, svd_mode: bool) -> DetectionReport:
    step = key.delta * 8.0 if svd_mode else key.delta
    values = _recover_bit_values(img, key, svd_mode)
    bits = _qim_decode(values, step)
    matched = int(np.sum(bits == np.asarray(key.payload)))
    p = binom_tail_p(matched, PAYLOAD_BITS)
    return DetectionReport(
        scheme="dwtdctsvd" if svd_mode else "dwtdct",
        bits_recovered=matched,
        p_value=p,
        detected=matched >= policy.bit_threshold,
        threshold_used=f"bits_recovered >= {policy.bit_threshold}/{PAYLOAD_BITS}",
    )


def detect_dwtdct(img: ColorImage, key: BitKey, policy: DetectionPolicy = DetectionPolicy()) -> DetectionReport:
    return _detect_bits(img, key, policy, svd_mode=False)


def detect_dwtdctsvd(img: ColorImage, key: BitKey, policy: DetectionPolicy = DetectionPolicy()) -> DetectionReport:
    return _detect_bits(img, key, policy, svd_mode=True)


# --------------------------------------------------------------------------
# ring scheme

@lru_cache(maxsize=64)
def _annulus_geometry(shape: tuple[int, int], radius: float):
    """Positions on |f - radius| <= 0.5 plus the conjugate-mirror index map."""
    h, w = shape
    cy, cx = h // 2, w // 2
    yy = np.arange(h)[:, None] - cy
    xx = np.arange(w)[None, :] - cx
    rmap = np.hypot(yy, xx)
    ys, xs = np.nonzero(np.abs(rmap - radius) <= 0.5)
    lin = ys * w + xs
    my = np.mod(2 * cy - ys, h)
    mx = np.mod(2 * cx - xs, w)
    mlin = my * w + mx
    where = {int(v): i for i, v in enumerate(lin)}
    mirror_idx = np.array([where[int(v)] for v in mlin], dtype=np.int64)
    canonical = lin <= mlin
    self_mirror = lin == mlin
    return ys, xs, mirror_idx, canonical, self_mirror


def _validate_radii(key: RingKey, shape: tuple[int, int]) -> None:
    nyquist = min(shape) / 2.0
    for r in key.radii:
        if r + 0.5 >= nyquist:
            raise GeometryError(f"ring radius {r} at or beyond Nyquist ({nyquist}) for {shape}")


def _expand_pattern(key: RingKey, shape: tuple[int, int]):
    """Seeded conjugate-symmetric complex pattern per annulus.

    Per coefficient: uniform phase, squared magnitude |base|^2 * (1 - v + v*E)
    with E ~ Exp(1) and v = RING_MAG_SPREAD. The spread keeps enough per-key
    variance in the null statistic for suppression attacks to register while
    fresh embeds still clear every null. Returns parallel lists of (ys, xs)
    position arrays and complex value arrays.
    """
    v = RING_MAG_SPREAD
    positions = []
    values = []
    for i, (radius, base) in enumerate(zip(key.radii, key.pattern)):
        ys, xs, mirror_idx, canonical, self_mirror = _annulus_geometry(shape, radius)
        rng = np.random.default_rng(np.random.SeedSequence([_RING_FIELD_TAG, key.seed, i]))
        draws = rng.random((len(ys), 2))
        phases = np.exp(2j * np.pi * draws[:, 0])
        mag_sq = 1.0 - v + v * (-np.log1p(-draws[:, 1]))
        field = base * phases * np.sqrt(mag_sq)
        field = np.where(canonical, field, np.conj(field[mirror_idx]))
        if self_mirror.any():
            field[self_mirror] = np.abs(field[self_mirror]) * np.sign(phases[self_mirror].real)
        positions.append((ys, xs))
        values.append(field)
    return positions, values


def embed_ring(img: ColorImage, key: RingKey) -> ColorImage:
    """Blend the key pattern onto the luminance-spectrum annuli."""
    _check_ring_geometry(img)
    _validate_radii(key, (img.height, img.width))
    y, cb, cr = _split_luminance(img)
    spec = fft_centered(RasterPlane(y))
    vals = spec.values.copy()
    positions, pattern = _expand_pattern(key, vals.shape)
    for (ys, xs), field in zip(positions, pattern):
        vals[ys, xs] = (1.0 - key.strength) * vals[ys, xs] + key.strength * field
    # both terms are conjugate-symmetric already; re-project to remove float drift
    vals = _symmetrize_on(vals, key, positions)
    y_out = ifft_centered(Spectrum(vals)).data
    return _merge_luminance(y_out, cb, cr, img.space)


def _symmetrize_on(vals: np.ndarray, key: RingKey, positions) -> np.ndarray:
    for radius, (ys, xs) in zip(key.radii, positions):
        _, _, mirror_idx, _, _ = _annulus_geometry(vals.shape, radius)
        cur = vals[ys, xs]
        vals[ys, xs] = 0.5 * (cur + np.conj(cur[mirror_idx]))
    return vals


def _check_ring_geometry(img: ColorImage) -> None:
    h, w = img.height, img.width
    if min(h, w) < 128:
        raise GeometryError(f"ring scheme needs at least 128x128, got {h}x{w}")
    if max(h, w) > 2 * min(h, w):
        raise GeometryError(f"ring scheme needs a square-ish image, got {h}x{w}")


def _ring_statistic(spec_vals: np.ndarray, key: RingKey) -> float:
    positions, pattern = _expand_pattern(key, spec_vals.shape)
    total = 0.0
    count = 0
    for (ys, xs), field in zip(positions, pattern):
        d = spec_vals[ys, xs] - field
        total += float(np.sum(d.real * d.real + d.imag * d.imag))
        count += len(field)
    return total / count


def _null_key(key: RingKey, seed: int) -> RingKey:
    """Fresh seeded key with identical radii, magnitudes, and strength."""
    rng = np.random.default_rng(np.random.SeedSequence([_RING_PHASE_TAG, seed]))
    pattern = []
    for base in key.pattern:
        phase = rng.uniform(0.0, 2.0 * math.pi)
        pattern.append(complex(abs(base) * math.cos(phase), abs(base) * math.sin(phase)))
    return RingKey(seed=seed, radii=key.radii, pattern=tuple(pattern), strength=key.strength)


def detect_ring(
    img: ColorImage,
    key: RingKey,
    policy: DetectionPolicy = DetectionPolicy(),
    null_samples: int = MIN_NULL_SAMPLES,
) -> DetectionReport:
    """Permutation-test detection against fresh random keys.

    p = (1 + #{null keys at least as close}) / (1 + null_samples).
    """
    if null_samples < MIN_NULL_SAMPLES:
        raise ValueError(f"need at least {MIN_NULL_SAMPLES} null samples, got {null_samples}")
    _check_ring_geometry(img)
    _validate_radii(key, (img.height, img.width))
    y, _, _ = _split_luminance(img)
    spec_vals = fft_centered(RasterPlane(y)).values
    s_obs = _ring_statistic(spec_vals, key)
    seed_rng = np.random.default_rng(np.random.SeedSequence([_RING_NULL_TAG, key.seed]))
    null_seeds = seed_rng.integers(0, 2**63 - 1, size=null_samples)
    at_least_as_close = 0
    for ns in null_seeds:
        s_null = _ring_statistic(spec_vals, _null_key(key, int(ns)))
        if s_null <= s_obs:
            at_least_as_close += 1
    p = (1 + at_least_as_close) / (1 + null_samples)
    return DetectionReport(
        scheme="ring",
        ring_statistic=s_obs,
        p_value=p,
        detected=p < policy.p_threshold,
        threshold_used=f"p < {policy.p_threshold} over {null_samples} null keys",
    )
