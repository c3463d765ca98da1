"""U-Net construction, the coverage-weighted loss, SGD training and checkpoints."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .dataset import PATCH_PIXELS, AugmentConfig, augment as augment_sample
from .errors import ArgumentError, ConfigError, DataError, FormatError, IoError, ShapeError
from .raster import PATCH_SIZE

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CSEG"
CHECKPOINT_VERSION = 1
# uint8 -> [-1, 1]; used until training measures the real channel statistics
FIXED_MEAN = (127.5, 127.5, 127.5)
FIXED_STD = (127.5, 127.5, 127.5)


@dataclass
class UNetConfig:
    depth: int = 4
    base_channels: int = 32
    dropout_p: float = 0.5
    dropout_stages: Optional[tuple] = None  # None -> the two deepest contractive stages
    in_channels: int = 3
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if PATCH_SIZE % (2 ** self.depth):
            raise ConfigError(f"{PATCH_SIZE} is not divisible by 2**{self.depth}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.in_channels != 3 or self.out_channels != 1:
            raise ConfigError("only 3 input channels and 1 output channel are supported")
        if self.dropout_stages is None:
            # stage `depth` is the bottleneck, the bottom of the contractive path
            self.dropout_stages = (self.depth - 1, self.depth)
        self.dropout_stages = tuple(sorted(int(s) for s in self.dropout_stages))
        if any(not 0 <= s <= self.depth for s in self.dropout_stages):
            raise ConfigError(f"dropout_stages must lie in 0..{self.depth}")

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** stage


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    loss_a: float = 400.0  # or "auto": derive from the training set via default_a
    seed: int = 0
    weighted: bool = True  # False trains with every f_M = 1
    standardize: bool = True  # per-channel mean/std of the training images, kept on the model

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.loss_a != "auto" and not (isinstance(self.loss_a, (int, float)) and self.loss_a > 0):
            raise ConfigError(f"loss_a must be > 0 or 'auto', got {self.loss_a!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


class UNet:
    """Encoder/decoder with skip connections; sigmoid output per pixel.

    Every contractive stage is two 3x3 conv + ReLU, followed by 2x2 max-pool.
    Each expansive stage upsamples (nearest), applies a 3x3 conv + ReLU,
    concatenates the matching skip, then two more 3x3 conv + ReLU. A 1x1
    conv maps to one channel.
    """

    def __init__(self, config: UNetConfig, params: dict):
        self.config = config
        self.params = params
        self.threshold: Optional[float] = None
        self.metadata: dict = {}
        self.input_mean: tuple = FIXED_MEAN
        self.input_std: tuple = FIXED_STD

    @staticmethod
    def layout(config: UNetConfig) -> list:
        """Ordered (name, shape) of every trainable tensor."""
        shapes = []

        def conv(name, cin, cout, k=3):
            shapes.append((f"{name}.weight", (cout, cin, k, k)))
            shapes.append((f"{name}.bias", (cout,)))

        cin = config.in_channels
        for s in range(config.depth):
            c = config.channels(s)
            conv(f"enc{s}.conv1", cin, c)
            conv(f"enc{s}.conv2", c, c)
            cin = c
        c = config.channels(config.depth)
        conv("bottleneck.conv1", cin, c)
        conv("bottleneck.conv2", c, c)
        for s in reversed(range(config.depth)):
            c = config.channels(s)
            conv(f"dec{s}.up", config.channels(s + 1), c)
            conv(f"dec{s}.conv1", 2 * c, c)
            conv(f"dec{s}.conv2", c, c)
        conv("head", config.channels(0), config.out_channels, k=1)
        return shapes

    def parameters(self) -> list:
        return list(self.params.values())

    def astype(self, dtype) -> "UNet":
        params = {k: ad.Tensor(v.data.astype(dtype), requires_grad=True, dtype=dtype)
                  for k, v in self.params.items()}
        other = UNet(self.config, params)
        other.threshold, other.metadata = self.threshold, dict(self.metadata)
        other.input_mean, other.input_std = self.input_mean, self.input_std
        return other

    def _conv(self, name, x):
        return ad.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _dropout(self, x, stage, training, rng_seed):
        if stage not in self.config.dropout_stages:
            return x
        seed = None if rng_seed is None else [*np.atleast_1d(rng_seed).tolist(), stage]
        return ad.dropout(x, self.config.dropout_p, training, seed)

    def forward(self, x, training: bool = False, rng_seed=None):
        """N x 3 x 64 x 64 float input (already scaled) -> N x 1 x 64 x 64 probabilities."""
        data = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
        if data.ndim != 4 or data.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected N x {self.config.in_channels} x H x W input, got {data.shape}")
        step = 2 ** self.config.depth
        if data.shape[2] % step or data.shape[3] % step:
            raise ShapeError(f"H and W must be multiples of {step}, got {data.shape[2:]}")
        skips = []
        h = x
        for s in range(self.config.depth):
            h = ad.relu(self._conv(f"enc{s}.conv1", h))
            h = ad.relu(self._conv(f"enc{s}.conv2", h))
            h = self._dropout(h, s, training, rng_seed)
            skips.append(h)
            h = ad.max_pool2d(h)
        h = ad.relu(self._conv("bottleneck.conv1", h))
        h = ad.relu(self._conv("bottleneck.conv2", h))
        h = self._dropout(h, self.config.depth, training, rng_seed)
        for s in reversed(range(self.config.depth)):
            h = ad.relu(self._conv(f"dec{s}.up", ad.upsample_nearest2x(h)))
            h = ad.concat_channels(skips[s], h)
            h = ad.relu(self._conv(f"dec{s}.conv1", h))
            h = ad.relu(self._conv(f"dec{s}.conv2", h))
        return ad.sigmoid(self._conv("head", h))

    __call__ = forward


def build(config: UNetConfig = None, seed: int = 0) -> UNet:
    """He-normal conv weights (variance 2 / fan_in), zero biases."""
    config = config or UNetConfig()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in UNet.layout(config):
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            value = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            value = np.zeros(shape)
        params[name] = ad.Tensor(value.astype(np.float32), requires_grad=True, dtype=np.float32)
    return UNet(config, params)


def param_count(model) -> int:
    params = model.parameters() if hasattr(model, "parameters") else model
    return int(sum(p.size for p in params))


def loss_weight(target, a: float = 400.0) -> float:
    """Per-patch weight f_M = (number of invasive pixels) / a + 1."""
    if a <= 0:
        raise ArgumentError(f"a must be > 0, got {a}")
    return float(np.count_nonzero(np.asarray(target))) / a + 1.0


def default_a(total_invasive_px: int, total_non_invasive_px: int, patch_pixels: int = PATCH_PIXELS) -> float:
    """Invasive-to-rest pixel ratio of the dataset, scaled to one patch."""
    if total_non_invasive_px <= 0:
        raise ArgumentError("total_non_invasive_px must be > 0")
    return total_invasive_px / total_non_invasive_px * patch_pixels


def input_stats(samples) -> tuple:
    """Per-channel mean and std over every pixel of the samples' images."""
    imgs = np.stack([s.image for s in samples]).astype(np.float64)
    mean = imgs.mean(axis=(0, 1, 2))
    std = imgs.std(axis=(0, 1, 2))
    std = np.where(std > 0, std, 1.0)  # a constant channel is only shifted
    return tuple(mean.tolist()), tuple(std.tolist())


def to_input(images, mean=FIXED_MEAN, std=FIXED_STD) -> np.ndarray:
    """uint8 N x H x W x 3 (or one H x W x 3) -> float32 N x 3 x H x W, (x - mean) / std per channel.

    The defaults map 0..255 onto [-1, 1].
    """
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected H x W x 3 images, got {arr.shape}")
    x = np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float32)
    m = np.asarray(mean, np.float32).reshape(1, 3, 1, 1)
    s = np.asarray(std, np.float32).reshape(1, 3, 1, 1)
    return (x - m) / s


@dataclass
class TrainResult:
    model: UNet
    losses: list = field(default_factory=list)

    def loss_csv(self) -> str:
        return "epoch,mean_loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(self.losses))


def train(model: UNet, train_set, config: TrainConfig = None, augment: AugmentConfig = None,
          on_epoch=None) -> TrainResult:
    """Mini-batch SGD on the coverage-weighted cross-entropy.

    Each epoch reshuffles with a generator seeded from (seed, epoch); every
    sample in a batch is augmented with its own seed before the forward pass.
    The model's parameters are updated in place. With ``standardize`` the
    model's input statistics are first reset from the (unaugmented) training
    images.
    """
    config = config or TrainConfig()
    samples = list(train_set)
    if not samples:
        raise DataError("training set is empty")
    if config.standardize:
        model.input_mean, model.input_std = input_stats(samples)
    params = model.parameters()
    lr = np.float32(config.learning_rate)
    losses = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(samples))
        total = 0.0
        for b, start in enumerate(range(0, len(samples), config.batch_size)):
            idx = order[start:start + config.batch_size]
            batch = [samples[i] for i in idx]
            if augment is not None:
                batch = [augment_sample(s, augment, [config.seed, epoch, int(i)]) for s, i in zip(batch, idx)]
            x = to_input(np.stack([s.image for s in batch]), model.input_mean, model.input_std)
            t = np.stack([s.target for s in batch])[:, None].astype(np.float32)
            if config.weighted:
                w = np.array([loss_weight(s.target, config.loss_a) for s in batch], np.float32)
            else:
                w = np.ones(len(batch), np.float32)
            with ad.Tape() as tape:
                probs = model.forward(x, training=True, rng_seed=[config.seed, epoch, b])
                loss = ad.bce_loss(probs, t, w)
            grads = tape.backward(loss, params)
            for p in params:
                p.data -= lr * grads[p]
            total += loss.item() * len(batch)
        losses.append(total / len(samples))
        log.debug("epoch %d mean loss %.6f", epoch + 1, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    return TrainResult(model, losses)


def predict(model: UNet, image, batch_size: int = 64) -> np.ndarray:
    """Probability map(s) with dropout disabled.

    One H x W x 3 image gives H x W; a stack N x H x W x 3 gives N x H x W.
    """
    arr = np.asarray(image)
    single = arr.ndim == 3
    x = to_input(arr, model.input_mean, model.input_std)
    if x.shape[2] != PATCH_SIZE or x.shape[3] != PATCH_SIZE:
        raise ShapeError(f"expected {PATCH_SIZE}x{PATCH_SIZE} patches, got {x.shape[2]}x{x.shape[3]}")
    outs = [model.forward(x[i:i + batch_size], training=False).data[:, 0]
            for i in range(0, len(x), batch_size)]
    probs = np.concatenate(outs) if outs else np.zeros((0, PATCH_SIZE, PATCH_SIZE), np.float32)
    return probs[0] if single else probs


# -- checkpoints -------------------------------------------------------------------

def _header(model: UNet) -> dict:
    cfg = asdict(model.config)
    cfg["dropout_stages"] = list(cfg["dropout_stages"])
    return {
        "config": cfg,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
        "metadata": model.metadata,
        "threshold": model.threshold,
        "input_mean": list(model.input_mean),
        "input_std": list(model.input_std),
    }


def save(model: UNet, path) -> None:
    """Write ``CSEG`` magic, version, header length, JSON header, float32 payload."""
    header = json.dumps(_header(model), sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    chunks += [np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in model.params.values()]
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path) -> UNet:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if 12 + hlen > len(blob):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:12 + hlen].decode())
        config = UNetConfig(**{**header["config"], "dropout_stages": tuple(header["config"]["dropout_stages"])})
        specs = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
        mean = tuple(float(v) for v in header["input_mean"])
        std = tuple(float(v) for v in header["input_std"])
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: bad header: {exc}") from exc
    if len(mean) != 3 or len(std) != 3 or not all(np.isfinite(mean + std)) or min(std) <= 0:
        raise FormatError(f"{path}: bad input statistics")
    if specs != [(n, tuple(s)) for n, s in UNet.layout(config)]:
        raise FormatError(f"{path}: tensor list does not match the configured architecture")
    payload = memoryview(blob)[12 + hlen:]
    expected = sum(4 * int(np.prod(s)) for _, s in specs)
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    params, offset = {}, 0
    for name, shape in specs:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        params[name] = ad.Tensor(arr.astype(np.float32), requires_grad=True, dtype=np.float32)
        offset += 4 * n
    model = UNet(config, params)
    model.threshold = header.get("threshold")
    model.metadata = header.get("metadata") or {}
    model.input_mean, model.input_std = mean, std
    return model
