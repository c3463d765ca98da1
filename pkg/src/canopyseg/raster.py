"""Raster I/O, orthomosaic partitioning and low-information patch rejection."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ArgumentError, DimensionError, FormatError, IoError

PATCH_SIZE = 64
DEFAULT_BRIGHTNESS_THRESHOLD = 160.0
DEFAULT_BLANK_THRESHOLD = 0.25

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
# PNG colour types
_GRAY, _RGB, _PALETTE, _GRAY_ALPHA, _RGBA = 0, 2, 3, 4, 6


@dataclass
class RgbRaster:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 4) uint8, RGBA
    resolution_cm_per_px: Optional[float] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.shape != (self.height, self.width, 4):
            raise DimensionError(
                f"pixels shape {self.pixels.shape} != ({self.height}, {self.width}, 4)"
            )
        if self.pixels.dtype != np.uint8:
            if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 255):
                raise ArgumentError("channel samples must lie in [0, 255]")
            self.pixels = self.pixels.astype(np.uint8)
        if self.resolution_cm_per_px is not None and self.resolution_cm_per_px <= 0:
            raise ArgumentError("resolution_cm_per_px must be positive")

    @classmethod
    def from_rgb(cls, rgb, alpha=None, resolution_cm_per_px=None):
        rgb = np.asarray(rgb, dtype=np.uint8)
        h, w = rgb.shape[:2]
        a = np.full((h, w), 255, np.uint8) if alpha is None else np.asarray(alpha, np.uint8)
        return cls(w, h, np.dstack([rgb, a]), resolution_cm_per_px)

    @property
    def rgb(self) -> np.ndarray:
        return self.pixels[..., :3]

    @property
    def alpha(self) -> np.ndarray:
        return self.pixels[..., 3]


@dataclass
class MaskRaster:
    width: int
    height: int
    values: np.ndarray  # (height, width) uint8 in {0, 1}

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != (self.height, self.width):
            raise DimensionError(f"values shape {self.values.shape} != ({self.height}, {self.width})")
        if not np.isin(self.values, (0, 1)).all():
            raise ArgumentError("mask values must be exactly 0 or 1")
        self.values = self.values.astype(np.uint8)

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values)
        return cls(values.shape[1], values.shape[0], values)


@dataclass(frozen=True)
class PatchOrigin:
    x: int
    y: int


@dataclass
class Patch:
    origin: PatchOrigin
    image: np.ndarray  # (64, 64, 3) uint8
    target: np.ndarray  # (64, 64) uint8
    alpha: np.ndarray = field(default=None, repr=False)  # (64, 64) uint8

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = np.full(self.image.shape[:2], 255, np.uint8)


@dataclass(frozen=True)
class Rejection:
    origin: PatchOrigin
    reason: str  # "brightness" or "blank"

    def to_line(self) -> str:
        return f"{self.origin.x},{self.origin.y},{self.reason}"


def _png_header(path: Path):
    try:
        with open(path, "rb") as fh:
            head = fh.read(33)
    except FileNotFoundError as exc:
        raise IoError(f"no such file: {path}") from exc
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(head) < 33 or head[:8] != _PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise FormatError(f"{path} is not a PNG file")
    width, height, bit_depth, color_type = struct.unpack(">IIBB", head[16:26])
    return width, height, bit_depth, color_type


def _decode(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im.convert(mode))
    except OSError as exc:
        raise FormatError(f"cannot decode {path}: {exc}") from exc
    except Exception as exc:  # Pillow raises assorted errors on corrupt streams
        raise FormatError(f"cannot decode {path}: {exc}") from exc


def load_rgb(path) -> RgbRaster:
    """Read an 8-bit RGB or RGBA PNG. RGB input gets alpha 255."""
    path = Path(path)
    _, _, depth, ctype = _png_header(path)
    if depth != 8 or ctype not in (_RGB, _RGBA, _PALETTE):
        raise FormatError(f"{path}: need 8-bit RGB/RGBA, got bit depth {depth}, colour type {ctype}")
    pixels = _decode(path, "RGBA")
    return RgbRaster(pixels.shape[1], pixels.shape[0], pixels)


def load_mask(path) -> MaskRaster:
    """Read an 8-bit grayscale or RGB PNG and binarize it at luma 128.

    RGB luma is the rounded mean of R, G and B.
    """
    path = Path(path)
    _, _, depth, ctype = _png_header(path)
    if depth != 8 or ctype not in (_GRAY, _RGB, _RGBA, _PALETTE, _GRAY_ALPHA):
        raise FormatError(f"{path}: need 8-bit grayscale or RGB, got bit depth {depth}, colour type {ctype}")
    if ctype in (_GRAY, _GRAY_ALPHA):
        luma = _decode(path, "L").astype(np.int32)
    else:
        rgb = _decode(path, "RGB").astype(np.int32)
        luma = np.rint(rgb.sum(axis=2) / 3.0).astype(np.int32)
    return MaskRaster.from_array((luma >= 128).astype(np.uint8))


def save_rgb(raster: RgbRaster, path) -> None:
    mode = "RGBA" if (raster.alpha != 255).any() else "RGB"
    data = raster.pixels if mode == "RGBA" else np.ascontiguousarray(raster.rgb)
    _save(Image.fromarray(data, mode), path)


def save_mask(mask: MaskRaster, path) -> None:
    _save(Image.fromarray((mask.values * 255).astype(np.uint8), "L"), path)


def save_png_array(array, path) -> None:
    """Write an (H, W) gray or (H, W, 3|4) uint8 array as PNG."""
    _save(Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)), path)


def _save(image: Image.Image, path) -> None:
    try:
        image.save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def grid_origins(width: int, height: int, patch: int = PATCH_SIZE, stride: int = PATCH_SIZE):
    if patch <= 0 or stride <= 0:
        raise ArgumentError(f"patch and stride must be positive, got {patch}, {stride}")
    xs = range(0, width - patch + 1, stride)
    ys = range(0, height - patch + 1, stride)
    return [PatchOrigin(x, y) for y in ys for x in xs]


def partition(image: RgbRaster, mask: MaskRaster, patch: int = PATCH_SIZE, stride: int = PATCH_SIZE):
    """Cut aligned image/target crops on a regular grid, row by row.

    Windows that would cross the right or bottom border are dropped.
    """
    if (image.width, image.height) != (mask.width, mask.height):
        raise DimensionError(
            f"image is {image.width}x{image.height} but mask is {mask.width}x{mask.height}"
        )
    if patch <= 0 or stride <= 0:
        raise ArgumentError(f"patch and stride must be positive, got {patch}, {stride}")
    if patch > min(image.width, image.height):
        raise DimensionError(f"patch {patch} exceeds raster size {image.width}x{image.height}")
    out = []
    for o in grid_origins(image.width, image.height, patch, stride):
        win = (slice(o.y, o.y + patch), slice(o.x, o.x + patch))
        px = image.pixels[win]
        out.append(Patch(o, px[..., :3].copy(), mask.values[win].copy(), px[..., 3].copy()))
    return out


def mean_brightness(patch) -> float:
    """Mean over all R, G, B samples of a patch; alpha is ignored."""
    arr = patch.image if isinstance(patch, Patch) else np.asarray(patch)
    return float(arr[..., :3].mean(dtype=np.float64))


def filter_patches(
    patches,
    brightness_threshold: float = DEFAULT_BRIGHTNESS_THRESHOLD,
    blank_threshold: float = DEFAULT_BLANK_THRESHOLD,
):
    """Drop mostly-ground (too bright) and mostly-blank (alpha 0) patches.

    Returns ``(kept, rejections)``; kept preserves input order.
    """
    if not 0 <= brightness_threshold <= 255:
        raise ArgumentError(f"brightness_threshold must be in [0, 255], got {brightness_threshold}")
    if not 0 <= blank_threshold <= 1:
        raise ArgumentError(f"blank_threshold must be in [0, 1], got {blank_threshold}")
    kept, log = [], []
    for p in patches:
        if mean_brightness(p) > brightness_threshold:
            log.append(Rejection(p.origin, "brightness"))
        elif np.count_nonzero(p.alpha == 0) / p.alpha.size > blank_threshold:
            log.append(Rejection(p.origin, "blank"))
        else:
            kept.append(p)
    return kept, log


def write_rejection_log(rejections, path) -> None:
    Path(path).write_text("".join(r.to_line() + "\n" for r in rejections))


def read_rejection_log(path):
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            x, y, reason = line.split(",")
            out.append(Rejection(PatchOrigin(int(x), int(y)), reason))
    return out
