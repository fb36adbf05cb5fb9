"""U-shaped model assembly, parameter counting and checkpoint archives.

The encoder/decoder levels use additive skip connections; the full variant
inserts an FFT transformer block on the configured skip paths. The head is
zero-initialized and the network input is added back globally, so a freshly
built model of any variant is the identity map.
"""

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .blocks import F2T2Block, HiTBlock, NAFBlock
from .errors import CheckpointError, ConfigError, ShapeError
from .padding import pad_to_multiple

VARIANTS = ("naf_only", "naf_hit", "full")

CHECKPOINT_SCHEMA_VERSION = 1
_MODEL_META_KEYS = ("schema_version", "config", "variant", "seed", "iteration")


@dataclass
class ModelConfig:
    base_width: int = 16
    num_levels: int = 4
    enc_blocks: tuple = (1, 1, 1)
    middle_blocks: int = 1
    dec_blocks: tuple = (1, 1, 1)
    hit_enabled: bool = True
    f2t2_skip_levels: tuple = (0,)
    window_hierarchy: tuple = (4, 8, 16)

    def __post_init__(self):
        self.enc_blocks = tuple(self.enc_blocks)
        self.dec_blocks = tuple(self.dec_blocks)
        self.f2t2_skip_levels = tuple(self.f2t2_skip_levels)
        self.window_hierarchy = tuple(self.window_hierarchy)
        if self.num_levels < 2:
            raise ConfigError(f"num_levels must be >= 2, got {self.num_levels}")
        if self.base_width < 2 * len(self.window_hierarchy):
            raise ConfigError(
                f"base_width {self.base_width} too small: each of the "
                f"{len(self.window_hierarchy)} window groups needs >= 2 channels"
            )
        stages = self.num_levels - 1
        if len(self.enc_blocks) != stages or len(self.dec_blocks) != stages:
            raise ConfigError(
                f"enc_blocks/dec_blocks must list {stages} stages for "
                f"num_levels={self.num_levels}, got {len(self.enc_blocks)}/{len(self.dec_blocks)}"
            )
        if self.middle_blocks < 1 or any(n < 1 for n in self.enc_blocks + self.dec_blocks):
            raise ConfigError("every stage needs at least one block")
        for level in self.f2t2_skip_levels:
            if not 0 <= level < self.num_levels - 1:
                raise ConfigError(
                    f"f2t2_skip_level {level} out of range [0, {self.num_levels - 1})"
                )
        if not self.window_hierarchy or any(
            w < 4 or w % 4 for w in self.window_hierarchy
        ):
            raise ConfigError("window sizes must be positive multiples of 4")
        if tuple(sorted(self.window_hierarchy)) != self.window_hierarchy or (
            len(set(self.window_hierarchy)) != len(self.window_hierarchy)
        ):
            # the channel split hands remainder channels to the last group,
            # which must be the largest window
            raise ConfigError(
                f"window hierarchy must be strictly increasing, got "
                f"{self.window_hierarchy}"
            )

    @property
    def pad_multiple(self):
        return max(16, max(self.window_hierarchy)) * 2 ** (self.num_levels - 1)


def desk_model_config():
    """Small preset that trains in minutes on a CPU."""
    return ModelConfig(base_width=16, num_levels=3, enc_blocks=(1, 1),
                       middle_blocks=1, dec_blocks=(1, 1))


def full_scale_model_config():
    """Width/depth matching the common restoration-baseline defaults."""
    return ModelConfig(base_width=32, num_levels=5, enc_blocks=(2, 2, 4, 8),
                       middle_blocks=12, dec_blocks=(2, 2, 2, 2))


def _stage(channels, count, hit, windows):
    blocks = [NAFBlock(channels) for _ in range(count - 1 if hit else count)]
    if hit:
        blocks.append(HiTBlock(channels, windows))
    return nn.Sequential(*blocks)


class F2T2HiTNet(nn.Module):
    """Single-stage U-shaped restoration network predicting the transmission
    layer from a blended image."""

    def __init__(self, config, variant="full"):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.config = config
        self.variant = variant
        self.seed = None

        hit = config.hit_enabled and variant != "naf_only"
        f2t2_levels = config.f2t2_skip_levels if variant == "full" else ()
        windows = config.window_hierarchy

        width = config.base_width
        self.stem = nn.Conv2d(3, width, 3, padding=1)

        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        c = width
        for count in config.enc_blocks:
            self.encoders.append(_stage(c, count, hit, windows))
            self.downs.append(nn.Conv2d(c, c * 2, 2, stride=2))
            c *= 2

        self.middle = _stage(c, config.middle_blocks, hit, windows)

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for count in reversed(config.dec_blocks):
            self.ups.append(nn.Sequential(
                nn.Conv2d(c, c * 2, 1, bias=False), nn.PixelShuffle(2)))
            c //= 2
            self.decoders.append(_stage(c, count, hit, windows))

        self.skip_mixers = nn.ModuleDict(
            {str(level): F2T2Block(width * 2 ** level) for level in f2t2_levels})

        self.head = nn.Conv2d(width, 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        if x.dim() not in (3, 4):
            raise ShapeError(f"expected a 3- or 4-d image tensor, got {x.dim()}-d")
        if x.shape[-3] != 3:
            raise ShapeError(f"expected 3 input channels, got {x.shape[-3]}")
        in_h, in_w = x.shape[-2:]
        padded = pad_to_multiple(x, self.config.pad_multiple)

        h = self.stem(padded)
        skips = []
        for encode, down in zip(self.encoders, self.downs):
            h = encode(h)
            skips.append(h)
            h = down(h)
        h = self.middle(h)
        level = len(self.encoders) - 1
        for up, decode in zip(self.ups, self.decoders):
            h = up(h)
            skip = skips[level]
            key = str(level)
            if key in self.skip_mixers:
                skip = self.skip_mixers[key](skip)
            h = decode(h + skip)
            level -= 1

        y = self.head(h) + padded
        y = y[..., :in_h, :in_w]
        if not self.training:
            y = y.clamp(0.0, 1.0)
        return y


def build_model(config, variant="full", seed=0):
    """Construct and deterministically initialize a model from a seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = F2T2HiTNet(config, variant)
    model.seed = seed
    return model


def count_params(model):
    return sum(p.numel() for p in model.parameters())


# --- checkpoint archive -----------------------------------------------------
#
# A checkpoint is one .npz holding every parameter array keyed as
# "model.<state_dict key>" (plus "opt.*" arrays for training state) and a
# "_metadata" JSON record. Loading is strict: unknown or missing keys fail.


def _write_archive(path, arrays, metadata):
    payload = dict(arrays)
    payload["_metadata"] = np.array(json.dumps(metadata))
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npz.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _read_archive(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as archive:
        arrays = {k: archive[k] for k in archive.files if k != "_metadata"}
        if "_metadata" not in archive.files:
            raise CheckpointError(f"{path}: no metadata record")
        metadata = json.loads(str(archive["_metadata"]))
    return arrays, metadata


def _check_metadata(metadata, path, optional_keys=()):
    required = set(_MODEL_META_KEYS)
    allowed = required | set(optional_keys)
    got = set(metadata)
    missing = sorted(required - got)
    unknown = sorted(got - allowed)
    if missing:
        raise CheckpointError(f"{path}: metadata missing key {missing[0]!r}")
    if unknown:
        raise CheckpointError(f"{path}: unexpected metadata key {unknown[0]!r}")
    version = metadata["schema_version"]
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            f"{path}: schema version {version} != {CHECKPOINT_SCHEMA_VERSION}")


def model_arrays(model):
    return {"model." + k: v.detach().cpu().numpy().copy()
            for k, v in model.state_dict().items()}


def assign_model_arrays(model, arrays):
    """Copy "model.*" arrays into the module; any key or shape mismatch fails
    with the first offending key."""
    state = model.state_dict()
    want = {"model." + k for k in state}
    have = {k for k in arrays if k.startswith("model.")}
    missing = sorted(want - have)
    extra = sorted(have - want)
    if missing:
        raise CheckpointError(f"missing parameter key {missing[0]!r}")
    if extra:
        raise CheckpointError(f"unexpected parameter key {extra[0]!r}")
    for key in sorted(want):
        name = key[len("model."):]
        value = arrays[key]
        if tuple(value.shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"shape mismatch for {key!r}: checkpoint {tuple(value.shape)} "
                f"vs model {tuple(state[name].shape)}")
    with torch.no_grad():
        for name, tensor in state.items():
            tensor.copy_(torch.from_numpy(arrays["model." + name]))
    model.load_state_dict(state)


def save_model_checkpoint(path, model, iteration=0, extra_arrays=None, extra_metadata=None):
    arrays = model_arrays(model)
    if extra_arrays:
        arrays.update(extra_arrays)
    metadata = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": asdict(model.config),
        "variant": model.variant,
        "seed": model.seed,
        "iteration": iteration,
    }
    if extra_metadata:
        metadata.update(extra_metadata)
    _write_archive(path, arrays, metadata)


def load_model_checkpoint(path, extra_meta_keys=()):
    """Rebuild the model a checkpoint describes and load its weights.

    Returns (model, arrays, metadata); training state arrays under "opt."
    are passed through untouched.
    """
    arrays, metadata = _read_archive(path)
    _check_metadata(metadata, path, optional_keys=set(extra_meta_keys) | {"train"})
    for key in arrays:
        if not (key.startswith("model.") or key.startswith("opt.")):
            raise CheckpointError(f"{path}: unexpected array key {key!r}")
    config = ModelConfig(**metadata["config"])
    model = build_model(config, metadata["variant"], metadata["seed"])
    assign_model_arrays(model, arrays)
    return model, arrays, metadata
