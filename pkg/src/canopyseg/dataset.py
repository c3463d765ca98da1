"""Labelled patch samples: coverage categories, stratified splits, augmentation
and the on-disk patch store."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DataError, FormatError, IoError
from .raster import PATCH_SIZE, load_mask, load_rgb, save_png_array

PATCH_PIXELS = PATCH_SIZE * PATCH_SIZE
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.6, 0.2, 0.2)


class CoverageCategory(str, Enum):
    C0 = "C0"
    C1_20 = "C1_20"
    C21_50 = "C21_50"
    C51_80 = "C51_80"
    C81_100 = "C81_100"

    @property
    def rank(self) -> int:
        return CATEGORIES.index(self)

    @property
    def label(self) -> str:
        return {"C0": "0", "C1_20": "1-20", "C21_50": "21-50", "C51_80": "51-80", "C81_100": "81-100"}[self.value]


CATEGORIES = tuple(CoverageCategory)


def coverage(target) -> int:
    return int(np.count_nonzero(np.asarray(target)))


def categorize(coverage_px: int, total_px: int = PATCH_PIXELS) -> CoverageCategory:
    """Bin a patch by invasive-pixel count.

    Upper bounds are floor(20%), floor(50%) and floor(80%) of the patch area,
    i.e. 819 / 2048 / 3276 for 64x64.
    """
    if not 0 <= coverage_px <= total_px:
        raise ArgumentError(f"coverage_px must be in [0, {total_px}], got {coverage_px}")
    if coverage_px == 0:
        return CoverageCategory.C0
    if coverage_px <= math.floor(0.2 * total_px):
        return CoverageCategory.C1_20
    if coverage_px <= math.floor(0.5 * total_px):
        return CoverageCategory.C21_50
    if coverage_px <= math.floor(0.8 * total_px):
        return CoverageCategory.C51_80
    return CoverageCategory.C81_100


@dataclass
class PatchSample:
    id: str
    image: np.ndarray  # (64, 64, 3) uint8
    target: np.ndarray  # (64, 64) uint8 in {0, 1}
    coverage_px: int = -1
    category: CoverageCategory = None
    split: str = "unassigned"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.uint8)
        self.target = np.asarray(self.target, dtype=np.uint8)
        if self.image.shape[:2] != self.target.shape or self.image.shape[2:] != (3,):
            raise ArgumentError(f"image {self.image.shape} and target {self.target.shape} not aligned")
        if self.coverage_px < 0:
            self.coverage_px = coverage(self.target)
        if self.category is None:
            self.category = categorize(self.coverage_px, self.target.size)
        self.category = CoverageCategory(self.category)


@dataclass
class AugmentConfig:
    rot90: bool = True
    flips: bool = True
    brightness_range: tuple = (0.8, 1.2)
    sharpness_range: tuple = (0.0, 0.5)
    color_gain_range: tuple = (0.9, 1.1)
    channel_shift_max: int = 10

    def __post_init__(self):
        for name in ("brightness_range", "sharpness_range", "color_gain_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ArgumentError(f"{name}: lo {lo} > hi {hi}")
            setattr(self, name, (float(lo), float(hi)))
        if not 0 <= self.channel_shift_max <= 255:
            raise ArgumentError("channel_shift_max must be in [0, 255]")

    @classmethod
    def identity(cls):
        """Spatial transforms only; every photometric parameter is neutral."""
        return cls(True, True, (1.0, 1.0), (0.0, 0.0), (1.0, 1.0), 0)

    @classmethod
    def none(cls):
        return cls(False, False, (1.0, 1.0), (0.0, 0.0), (1.0, 1.0), 0)


# -- splits ------------------------------------------------------------------

def allocate(n: int, ratios=DEFAULT_RATIOS) -> tuple:
    """Largest-remainder apportionment of n items over the ratios.

    Floors first; leftover items go to the largest fractional parts, ties
    broken toward the later split (test, then val). Every count is within
    one item of n * ratio.
    """
    quotas = [n * r for r in ratios]
    counts = [math.floor(q + 1e-9) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), -i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return tuple(counts)


@dataclass
class SplitManifest:
    entries: list  # (id, CoverageCategory, split)
    seed: int
    ratios: tuple = DEFAULT_RATIOS

    def split_of(self) -> dict:
        return {i: s for i, _, s in self.entries}

    def ids(self, split: str) -> list:
        return [i for i, _, s in self.entries if s == split]

    def apply(self, samples) -> dict:
        """Stamp each sample's split and group them by split name."""
        lookup = self.split_of()
        groups = {s: [] for s in SPLITS}
        for sample in samples:
            if sample.id in lookup:
                sample.split = lookup[sample.id]
                groups[sample.split].append(sample)
        return groups

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "entries": [{"id": i, "category": c.value, "split": s} for i, c, s in self.entries],
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        try:
            doc = json.loads(text)
            entries = [(e["id"], CoverageCategory(e["category"]), e["split"]) for e in doc["entries"]]
            return cls(entries, int(doc["seed"]), tuple(doc["ratios"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"bad split manifest: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        try:
            return cls.from_json(Path(path).read_text())
        except OSError as exc:
            raise IoError(f"cannot read manifest {path}: {exc}") from exc


def stratified_split(samples, ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitManifest:
    """Split each coverage category separately so every split holds the same
    category mix. Within a category, ids are sorted and then shuffled by a
    generator seeded from (seed, category)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ArgumentError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    by_cat = {c: [] for c in CATEGORIES}
    for s in samples:
        by_cat[s.category].append(s.id)
    assigned = {}
    for cat, ids in by_cat.items():
        ids = sorted(ids)
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, cat.rank])
        order = rng.permutation(len(ids))
        n_train, n_val, _ = allocate(len(ids), ratios)
        for pos, j in enumerate(order):
            split = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
            assigned[ids[j]] = split
    entries = [(s.id, s.category, assigned[s.id]) for s in samples]
    return SplitManifest(entries, seed, ratios)


# -- augmentation --------------------------------------------------------------

def apply_spatial(array, k: int, flip: int):
    """Rotate by k quarter turns, then flip (0 none, 1 horizontal, 2 vertical)."""
    out = np.rot90(array, k, axes=(0, 1))
    if flip == 1:
        out = out[:, ::-1]
    elif flip == 2:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


def invert_spatial(array, k: int, flip: int):
    out = array
    if flip == 1:
        out = out[:, ::-1]
    elif flip == 2:
        out = out[::-1, :]
    return np.ascontiguousarray(np.rot90(out, -k, axes=(0, 1)))


def _box3x3(img):
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = img.shape[:2]
    acc = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy:dy + h, dx:dx + w]
    return acc / 9.0


def photometric(image, brightness, sharpness, gains, shifts):
    """Brightness scale, unsharp blend, per-channel gain and shift; clamp to
    [0, 255] and round back to uint8."""
    img = image.astype(np.float64) * brightness
    if sharpness:
        unsharp = 2.0 * img - _box3x3(img)
        img = (1.0 - sharpness) * img + sharpness * unsharp
    img = img * np.asarray(gains, np.float64) + np.asarray(shifts, np.float64)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def augment(sample: PatchSample, config: AugmentConfig, rng_seed) -> PatchSample:
    rng = np.random.default_rng(rng_seed)
    k = int(rng.integers(4)) if config.rot90 else 0
    flip = int(rng.integers(3)) if config.flips else 0
    brightness = rng.uniform(*config.brightness_range)
    sharpness = rng.uniform(*config.sharpness_range)
    gains = rng.uniform(*config.color_gain_range, size=3)
    m = config.channel_shift_max
    shifts = rng.integers(-m, m + 1, size=3)
    image = photometric(apply_spatial(sample.image, k, flip), brightness, sharpness, gains, shifts)
    target = apply_spatial(sample.target, k, flip)
    return PatchSample(sample.id, image, target, sample.coverage_px, sample.category, sample.split)


# -- patch store -----------------------------------------------------------------

INDEX_NAME = "index.json"


@dataclass
class StoreEntry:
    id: str
    origin: tuple
    coverage_px: int
    category: CoverageCategory
    source: str = ""
    extra: dict = field(default_factory=dict)


def write_store(directory, samples, origins=None, source: str = "") -> Path:
    """Write ``<id>.img.png`` / ``<id>.tgt.png`` pairs plus ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        save_png_array(s.image, directory / f"{s.id}.img.png")
        save_png_array(s.target * 255, directory / f"{s.id}.tgt.png")
        origin = list(origins[i]) if origins is not None else None
        entries.append(
            {"id": s.id, "origin": origin, "coverage_px": s.coverage_px,
             "category": s.category.value, "source": source}
        )
    index = directory / INDEX_NAME
    index.write_text(json.dumps({"patch_size": PATCH_SIZE, "entries": entries}, indent=2) + "\n")
    return index


def read_index(directory) -> list:
    path = Path(directory) / INDEX_NAME
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise IoError(f"no patch index at {path}") from exc
    except ValueError as exc:
        raise FormatError(f"bad patch index {path}: {exc}") from exc
    return [
        StoreEntry(e["id"], tuple(e["origin"]) if e.get("origin") else None, e["coverage_px"],
                   CoverageCategory(e["category"]), e.get("source", ""))
        for e in doc["entries"]
    ]


def read_store(directory, ids=None) -> list:
    directory = Path(directory)
    wanted = None if ids is None else set(ids)
    samples = []
    for e in read_index(directory):
        if wanted is not None and e.id not in wanted:
            continue
        image = load_rgb(directory / f"{e.id}.img.png").rgb.copy()
        target = load_mask(directory / f"{e.id}.tgt.png").values
        s = PatchSample(e.id, image, target)
        if s.coverage_px != e.coverage_px:
            raise DataError(f"{e.id}: index says {e.coverage_px} invasive px, target has {s.coverage_px}")
        samples.append(s)
    if not samples and wanted:
        raise DataError(f"none of the requested ids found in {directory}")
    return samples
