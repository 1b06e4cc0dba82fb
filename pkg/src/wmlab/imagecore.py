"""Image planes, PNG I/O, BT.601 color conversion, and channel statistics.

All pixel math is double precision on values nominally in [0, 1]; clamping
and 8-bit quantization happen only when an image is written to disk.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Literal

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    ColorSpaceError,
    CorruptStreamError,
    GeometryError,
    MissingFileError,
    UnsupportedImageError,
    UnwritablePathError,
)

ColorSpace = Literal["rgb", "ycbcr"]

# Full-range BT.601. Rows: Y, Cb, Cr of (R, G, B); offsets (0, 0.5, 0.5).
_KR, _KG, _KB = 0.299, 0.587, 0.114
_BT601 = np.array(
    [
        [_KR, _KG, _KB],
        [-_KR / (2 * (1 - _KB)), -_KG / (2 * (1 - _KB)), 0.5],
        [0.5, -_KG / (2 * (1 - _KR)), -_KB / (2 * (1 - _KR))],
    ]
)
_BT601_INV = np.linalg.inv(_BT601)
_YCBCR_OFFSET = np.array([0.0, 0.5, 0.5])


@dataclass(frozen=True)
class RasterPlane:
    """One floating-point sample plane, row-major."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise GeometryError(f"plane must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("plane contains non-finite samples")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def validate_range(self, lo: float = -0.5, hi: float = 1.5) -> None:
        """Check the internal working range; raises on drift beyond it."""
        if self.data.min() < lo or self.data.max() > hi:
            raise ValueError(
                f"samples outside [{lo}, {hi}]: min={self.data.min()}, max={self.data.max()}"
            )


@dataclass(frozen=True)
class ColorImage:
    """Three equally sized planes plus a color-space tag."""

    planes: tuple[RasterPlane, RasterPlane, RasterPlane]
    space: ColorSpace = "rgb"

    def __post_init__(self):
        shapes = {p.data.shape for p in self.planes}
        if len(shapes) != 1:
            raise GeometryError(f"planes differ in shape: {shapes}")
        if self.space not in ("rgb", "ycbcr"):
            raise ColorSpaceError(f"unknown color space {self.space!r}")

    @classmethod
    def from_array(cls, arr: np.ndarray, space: ColorSpace = "rgb") -> "ColorImage":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise GeometryError(f"expected (H, W, 3) array, got {arr.shape}")
        return cls(tuple(RasterPlane(arr[:, :, c]) for c in range(3)), space)

    def to_array(self) -> np.ndarray:
        return np.stack([p.data for p in self.planes], axis=2)

    @property
    def height(self) -> int:
        return self.planes[0].height

    @property
    def width(self) -> int:
        return self.planes[0].width


@dataclass(frozen=True)
class ColorStats:
    """Per-channel population mean and standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(self.std < 0):
            raise ValueError("negative standard deviation")


def load_image(path: str | os.PathLike) -> ColorImage:
    """Read an 8-bit RGB PNG (no alpha) into a [0, 1] ColorImage."""
    if not os.path.exists(path):
        raise MissingFileError(f"no such file: {path}")
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode in ("RGBA", "LA", "PA") or "transparency" in im.info:
                raise UnsupportedImageError(f"alpha channel not supported: {path}")
            if mode != "RGB":
                raise UnsupportedImageError(
                    f"expected 8-bit RGB, got mode {mode!r}: {path}"
                )
            im.load()
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except UnidentifiedImageError as exc:
        raise CorruptStreamError(f"not a decodable image: {path}") from exc
    except (OSError, SyntaxError) as exc:
        raise CorruptStreamError(f"corrupt image stream: {path}") from exc
    return ColorImage.from_array(arr, "rgb")


def save_image(img: ColorImage, path: str | os.PathLike) -> None:
    """Clamp to [0, 1], quantize to 8 bits (round half away from zero), write PNG."""
    if img.space != "rgb":
        raise ColorSpaceError("save_image requires an RGB image")
    arr = np.clip(img.to_array(), 0.0, 1.0)
    # values are >= 0 after clamping, so floor(x + 0.5) rounds half away from zero
    quant = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    try:
        Image.fromarray(quant, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise UnwritablePathError(f"cannot write image to {path}: {exc}") from exc


def rgb_to_ycbcr(img: ColorImage) -> ColorImage:
    """Full-range BT.601 forward transform (channel order Y, Cb, Cr)."""
    if img.space != "rgb":
        raise ColorSpaceError(f"expected rgb image, got {img.space!r}")
    out = np.tensordot(img.to_array(), _BT601.T, axes=1) + _YCBCR_OFFSET
    return ColorImage.from_array(out, "ycbcr")


def ycbcr_to_rgb(img: ColorImage) -> ColorImage:
    """Inverse of :func:`rgb_to_ycbcr`; round trip is identity within 1e-6."""
    if img.space != "ycbcr":
        raise ColorSpaceError(f"expected ycbcr image, got {img.space!r}")
    out = np.tensordot(img.to_array() - _YCBCR_OFFSET, _BT601_INV.T, axes=1)
    return ColorImage.from_array(out, "rgb")


def luminance(img: ColorImage) -> np.ndarray:
    """Y plane of an image in either color space."""
    if img.space == "ycbcr":
        return img.planes[0].data
    return rgb_to_ycbcr(img).planes[0].data


def channel_stats(img: ColorImage) -> ColorStats:
    """Population mean and std of each plane."""
    arr = img.to_array()
    return ColorStats(mean=arr.mean(axis=(0, 1)), std=arr.std(axis=(0, 1)))
