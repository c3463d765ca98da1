"""Command-line pipeline: synth -> prepare -> split -> train -> calibrate -> eval / predict.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import model as md
from . import raster as rs
from . import synth
from ._kernels import BACKEND
from .errors import CanopySegError, ConfigError

log = logging.getLogger("canopyseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


@dataclasses.dataclass
class RunConfig:
    scene: synth.SceneConfig = dataclasses.field(default_factory=synth.SceneConfig)
    scene_count: int = 4
    augment: ds.AugmentConfig = dataclasses.field(default_factory=ds.AugmentConfig)
    unet: md.UNetConfig = dataclasses.field(default_factory=md.UNetConfig)
    train: md.TrainConfig = dataclasses.field(default_factory=md.TrainConfig)
    augment_enabled: bool = True
    brightness_threshold: float = rs.DEFAULT_BRIGHTNESS_THRESHOLD
    blank_threshold: float = rs.DEFAULT_BLANK_THRESHOLD
    split_seed: int = 0
    calibration_grid: tuple = ev.DEFAULT_GRID

    _SECTIONS = {"scene": synth.SceneConfig, "augment": ds.AugmentConfig,
                 "unet": md.UNetConfig, "train": md.TrainConfig}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in doc.items():
            section = cls._SECTIONS.get(key)
            if section is None:
                kwargs[key] = tuple(value) if key == "calibration_grid" else value
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            fields = {f.name for f in dataclasses.fields(section)}
            bad = set(value) - fields
            if bad:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
            try:
                kwargs[key] = section(**{k: tuple(v) if isinstance(v, list) else v for k, v in value.items()})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad {key!r} section: {exc}") from exc
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["calibration_grid"] = list(self.calibration_grid)
        return out


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_split(data, manifest_path, split):
    manifest = ds.SplitManifest.load(manifest_path)
    ids = manifest.ids(split)
    samples = ds.read_store(data, ids) if ids else []
    order = {i: k for k, i in enumerate(ids)}
    samples.sort(key=lambda s: order[s.id])
    for s in samples:
        s.split = split
    return samples


def cmd_synth(args, cfg: RunConfig):
    out = Path(args.out)
    for k in range(cfg.scene_count):
        scene = dataclasses.replace(cfg.scene, seed=cfg.scene.seed + k)
        _, _, fraction = synth.write_scene(out, f"scene_{k:03d}", scene)
        log.info("scene_%03d: minority fraction %.4f", k, fraction)
    return EXIT_OK


def cmd_prepare(args, cfg: RunConfig):
    images, masks = args.image, args.mask
    if len(images) != len(masks):
        raise _Usage("--image and --mask must be given the same number of times")
    bright = cfg.brightness_threshold if args.brightness_threshold is None else args.brightness_threshold
    blank = cfg.blank_threshold if args.blank_threshold is None else args.blank_threshold
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples, origins, rejections = [], [], []
    for image_path, mask_path in zip(images, masks):
        stem = Path(image_path).name.split(".")[0]
        patches = rs.partition(rs.load_rgb(image_path), rs.load_mask(mask_path))
        kept, rejected = rs.filter_patches(patches, bright, blank)
        for p in kept:
            samples.append(ds.PatchSample(f"{stem}_{p.origin.x:05d}_{p.origin.y:05d}", p.image, p.target))
            origins.append((p.origin.x, p.origin.y))
        rejections += rejected
        log.info("%s: %d patches, %d kept, %d rejected", stem, len(patches), len(kept), len(rejected))
    ds.write_store(out, samples, origins)
    rs.write_rejection_log(rejections, out / "rejected.txt")
    return EXIT_OK


def cmd_split(args, cfg: RunConfig):
    seed = cfg.split_seed if args.seed is None else args.seed
    entries = ds.read_index(args.data)
    manifest = ds.stratified_split(entries, seed=seed)
    _write_text(args.out, manifest.to_json())
    counts = {s: len(manifest.ids(s)) for s in ds.SPLITS}
    log.info("split %s", counts)
    return EXIT_OK


def _loss_a(cfg_train, samples):
    if cfg_train.loss_a == "auto":
        inv = sum(s.coverage_px for s in samples)
        rest = sum(s.target.size for s in samples) - inv
        a = md.default_a(inv, rest)
        if a <= 0:
            raise ConfigError("loss_a=auto but the training set has no invasive pixels")
        log.info("loss_a from data: %.3f", a)
        return a
    return cfg_train.loss_a


def cmd_train(args, cfg: RunConfig):
    train_set = _load_split(args.data, args.manifest, "train")
    tcfg = cfg.train
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    if tcfg.loss_a == "auto":
        tcfg = dataclasses.replace(tcfg, loss_a=_loss_a(tcfg, train_set))
    model = md.build(cfg.unet, seed=tcfg.seed)
    log.info("U-Net with %d trainable parameters (kernels: %s)", md.param_count(model), BACKEND)
    result = md.train(model, train_set, tcfg, cfg.augment if cfg.augment_enabled else None,
                      on_epoch=lambda e, l: log.info("epoch %d loss %.6f", e + 1, l))
    model.metadata = {"train": dataclasses.asdict(tcfg), "train_samples": len(train_set),
                      "final_loss": result.losses[-1] if result.losses else None}
    md.save(model, args.out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else Path(args.out).with_suffix(".loss.csv")
    _write_text(loss_csv, result.loss_csv())
    return EXIT_OK


def cmd_calibrate(args, cfg: RunConfig):
    model = md.load(args.model)
    val = _load_split(args.data, args.manifest, "val")
    report = ev.calibrate_threshold(model, val, cfg.calibration_grid)
    model.threshold = report.chosen_threshold
    md.save(model, args.model)
    out = Path(args.out) if args.out else Path(args.model).with_suffix(".calibration.json")
    _write_text(out, json.dumps(report.to_dict(), indent=2) + "\n")
    sys.stdout.write(report.to_text())
    log.info("chosen threshold %.2f written to %s", report.chosen_threshold, args.model)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig):
    model = md.load(args.model)
    if args.threshold is not None:
        threshold, source = args.threshold, "argument"
    elif model.threshold is not None:
        threshold, source = model.threshold, "checkpoint"
    else:
        threshold, source = ev.DEFAULT_THRESHOLD, "default"
        log.warning("checkpoint has no calibrated threshold; using default %.2f", threshold)
    test = _load_split(args.data, args.manifest, "test")
    report = ev.evaluate(model, test, threshold, source)
    prefix = Path(args.out) if args.out else Path(args.model).with_suffix(".eval")
    _write_text(f"{prefix}.json", report.to_json())
    _write_text(f"{prefix}.txt", report.to_text())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig):
    model = md.load(args.model)
    threshold = args.threshold if args.threshold is not None else (model.threshold or ev.DEFAULT_THRESHOLD)
    image = rs.load_rgb(args.image)
    size = rs.PATCH_SIZE
    if image.width < size or image.height < size:
        raise ConfigError(f"image smaller than one {size}x{size} tile")
    if image.width % size or image.height % size:
        log.warning("image %dx%d is not a multiple of %d; border pixels get no prediction",
                    image.width, image.height, size)
    origins = rs.grid_origins(image.width, image.height)
    tiles = np.stack([image.rgb[o.y:o.y + size, o.x:o.x + size] for o in origins])
    probs = md.predict(model, tiles)
    full = np.zeros((image.height, image.width), np.float32)
    valid = np.zeros((image.height, image.width), bool)
    for o, p in zip(origins, probs):
        full[o.y:o.y + size, o.x:o.x + size] = p
        valid[o.y:o.y + size, o.x:o.x + size] = True
    rs.save_png_array(ev.overlay(image.rgb, full, threshold, valid), args.out)
    return EXIT_OK


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _Usage(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="canopyseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic scenes")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="partition, filter and index an orthomosaic")
    s.add_argument("--image", action="append", required=True)
    s.add_argument("--mask", action="append", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--brightness-threshold", type=float)
    s.add_argument("--blank-threshold", type=float)
    s.add_argument("--config")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("split", help="stratified 60/20/20 split")
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train a U-Net")
    s.add_argument("--data", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--loss-csv")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("calibrate", help="choose the output threshold on the validation split")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("eval", help="pixel rates and coverage-bucket detection on the test split")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--threshold", type=float)
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="overlay predictions on an image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float)
    s.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _Usage as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(getattr(args, "config", None))
        return args.func(args, cfg)
    except _Usage as exc:
        sys.stderr.write(f"{parser.prog}: error: {exc}\n")
        return EXIT_USAGE
    except CanopySegError as exc:
        sys.stderr.write(f"{parser.prog}: {type(exc).__name__}: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
