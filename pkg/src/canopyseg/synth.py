"""Synthetic two-species forest scenes with a controllable minority fraction.

The majority canopy is dark green with per-pixel noise; minority crowns are
yellow-green ellipses with radial shading, and optional sandy ground patches
are bright enough to be caught by the brightness filter.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import PatchSample
from .errors import ConfigError
from .raster import (DEFAULT_BLANK_THRESHOLD, DEFAULT_BRIGHTNESS_THRESHOLD, MaskRaster, RgbRaster,
                     filter_patches, partition, save_mask, save_rgb)

MAJORITY_RGB = (45.0, 85.0, 40.0)
MINORITY_RGB = (100.0, 125.0, 45.0)
GROUND_RGB = (228.0, 212.0, 182.0)
FRACTION_TOLERANCE = 0.2  # relative


@dataclass
class SceneConfig:
    width: int = 512
    height: int = 512
    minority_fraction_target: float = 0.10
    blob_count_range: tuple = (1, 2000)  # at least lo blobs, at most hi
    blob_radius_range: tuple = (6.0, 18.0)
    ground_patch_probability: float = 0.0  # per 128x128 cell
    texture_noise_amplitude: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.width < 64 or self.height < 64:
            raise ConfigError("scene must be at least 64x64")
        if not 0 < self.minority_fraction_target < 1:
            raise ConfigError("minority_fraction_target must be in (0, 1)")
        lo, hi = self.blob_count_range
        if lo < 0 or lo > hi:
            raise ConfigError(f"bad blob_count_range {self.blob_count_range}")
        rlo, rhi = self.blob_radius_range
        if rlo <= 0 or rlo > rhi:
            raise ConfigError(f"bad blob_radius_range {self.blob_radius_range}")
        if not 0 <= self.ground_patch_probability <= 1:
            raise ConfigError("ground_patch_probability must be in [0, 1]")
        if not 0 <= self.texture_noise_amplitude <= 255:
            raise ConfigError("texture_noise_amplitude must be in [0, 255]")
        self.blob_count_range = (int(lo), int(hi))
        self.blob_radius_range = (float(rlo), float(rhi))


def _ellipse(rng, h, w, cy, cx, ry, rx):
    """Boolean mask and normalised squared radius of a rotated ellipse."""
    theta = rng.uniform(0, np.pi)
    r = int(np.ceil(max(ry, rx)))
    y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u, v = dx * c + dy * s, -dx * s + dy * c
    rho = (u / rx) ** 2 + (v / ry) ** 2
    return (slice(y0, y1), slice(x0, x1)), rho


def generate(config: SceneConfig):
    """Render one scene. Returns (RgbRaster, MaskRaster, achieved fraction)."""
    rng = np.random.default_rng(config.seed)
    h, w = config.height, config.width
    amp = config.texture_noise_amplitude

    def noise(shape):
        return rng.uniform(-amp, amp, size=shape + (3,))

    img = np.asarray(MAJORITY_RGB) + noise((h, w))
    mask = np.zeros((h, w), np.uint8)

    cells = (h // 128) * (w // 128)
    for _ in range(int(rng.binomial(max(cells, 1), config.ground_patch_probability))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        win, rho = _ellipse(rng, h, w, cy, cx, rng.uniform(32, 56), rng.uniform(32, 56))
        inside = rho <= 1
        patch = img[win]
        patch[inside] = np.asarray(GROUND_RGB) + noise((int(inside.sum()),))

    target = config.minority_fraction_target
    lo_frac, hi_frac = target * (1 - FRACTION_TOLERANCE), target * (1 + FRACTION_TOLERANCE)
    lo_n, hi_n = config.blob_count_range
    rlo, rhi = config.blob_radius_range
    total = h * w
    count = int(mask.sum())
    for i in range(hi_n):
        if i >= lo_n and count / total >= target:
            break
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(rlo, rhi), rng.uniform(rlo, rhi)
        win, rho = _ellipse(rng, h, w, cy, cx, ry, rx)
        inside = rho <= 1
        added = int(np.count_nonzero(inside & (mask[win] == 0)))
        if i >= lo_n and (count + added) / total > hi_frac:
            continue
        shade = (1.0 - 0.3 * rho[inside])[:, None]
        patch = img[win]
        patch[inside] = np.asarray(MINORITY_RGB) * shade + noise((int(inside.sum()),))
        mask[win][inside] = 1
        count += added
    rgb = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    raster = RgbRaster.from_rgb(rgb)
    return raster, MaskRaster.from_array(mask), int(mask.sum()) / total


def write_scene(directory, scene_id: str, config: SceneConfig, raster=None, mask=None, fraction=None):
    """Write ``<id>.img.png``, ``<id>.tgt.png`` and a ``<id>.json`` sidecar."""
    if raster is None:
        raster, mask, fraction = generate(config)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_rgb(raster, directory / f"{scene_id}.img.png")
    save_mask(mask, directory / f"{scene_id}.tgt.png")
    sidecar = {"config": asdict(config), "achieved_minority_fraction": fraction}
    (directory / f"{scene_id}.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return raster, mask, fraction


def scene_samples(config: SceneConfig, prefix: str = "s",
                  brightness_threshold=DEFAULT_BRIGHTNESS_THRESHOLD,
                  blank_threshold=DEFAULT_BLANK_THRESHOLD) -> list:
    """Generate a scene and return its filtered 64x64 patches as samples."""
    raster, mask, _ = generate(config)
    kept, _ = filter_patches(partition(raster, mask), brightness_threshold, blank_threshold)
    return [PatchSample(f"{prefix}_{p.origin.x:05d}_{p.origin.y:05d}", p.image, p.target) for p in kept]
