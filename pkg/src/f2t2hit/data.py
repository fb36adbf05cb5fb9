"""Synthetic reflection pairs, paired-folder loading, cropping and augmentation.

Images live in memory as float32 tensors shaped (3, H, W) with values in
[0, 1]; on disk they are 8-bit PNG/JPEG normalized by 255. A paired dataset
directory holds blended/ and transmission/ subfolders with matching
filenames (plus an optional reflection/ folder).
"""

import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, DatasetError, ShapeError
from .padding import reflect_pad_to

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

# default sampling ranges for randomly drawn synthesis parameters
BETA_RANGE = (0.2, 1.0)
SIGMA_RANGE = (0.0, 5.0)


@dataclass
class SynthesisParams:
    """Reflection strength and blur for one synthesized pair."""

    beta: float = 0.6
    sigma: float = 2.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if not 0.0 <= self.sigma <= SIGMA_RANGE[1]:
            raise ConfigError(f"sigma must lie in [0, {SIGMA_RANGE[1]}], got {self.sigma}")


@dataclass
class ReflectionTriple:
    """Blended observation with its transmission and reflection planes.

    The reflection plane may be None for real paired data where only the
    blended/transmission images exist.
    """

    blended: torch.Tensor
    transmission: torch.Tensor
    reflection: Optional[torch.Tensor] = None

    def __post_init__(self):
        shapes = {tuple(self.blended.shape), tuple(self.transmission.shape)}
        if self.reflection is not None:
            shapes.add(tuple(self.reflection.shape))
        if len(shapes) != 1:
            raise ShapeError(f"triple planes disagree in shape: {sorted(shapes)}")


@dataclass
class DatasetSpec:
    root: str
    blended_dirname: str = "blended"
    transmission_dirname: str = "transmission"


def gaussian_kernel_1d(sigma, dtype=torch.float32):
    """Normalized 1-d Gaussian with radius ceil(3*sigma); a delta for sigma=0."""
    radius = math.ceil(3 * sigma)
    if radius == 0:
        return torch.ones(1, dtype=dtype)
    xs = torch.arange(-radius, radius + 1, dtype=dtype)
    kernel = torch.exp(-(xs ** 2) / (2 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_blur(image, sigma):
    """Separable Gaussian blur with reflect boundary handling."""
    if sigma == 0:
        return image.clone()
    kernel = gaussian_kernel_1d(sigma, dtype=image.dtype)
    radius = (kernel.numel() - 1) // 2
    channels = image.shape[-3]
    x = image if image.dim() == 4 else image.unsqueeze(0)
    padded = _reflect_all(x, radius)
    row = kernel.view(1, 1, 1, -1).expand(channels, 1, 1, -1)
    col = kernel.view(1, 1, -1, 1).expand(channels, 1, -1, 1)
    out = F.conv2d(padded, row, groups=channels)
    out = F.conv2d(out, col, groups=channels)
    return out if image.dim() == 4 else out.squeeze(0)


def _reflect_all(x, radius):
    # symmetric reflect pad on all four sides, stepped for small images
    h, w = x.shape[-2:]
    while radius > 0:
        step = min(radius, min(h, w) - 1)
        x = F.pad(x, (step, step, step, step), mode="reflect")
        h, w = x.shape[-2:]
        radius -= step
    return x


def synthesize_pair(transmission, reflection, params):
    """Blend a transmission image with a blurred, scaled reflection.

    blended = clip(T + beta * gaussian_blur(R, sigma), 0, 1)
    """
    if transmission.shape != reflection.shape:
        raise ShapeError(
            f"transmission {tuple(transmission.shape)} and reflection "
            f"{tuple(reflection.shape)} differ in shape")
    blended = transmission + params.beta * gaussian_blur(reflection, params.sigma)
    blended = blended.clamp(0.0, 1.0)
    return ReflectionTriple(blended, transmission.clone(), reflection.clone())


def _apply_all(triple, fn):
    return ReflectionTriple(
        fn(triple.blended), fn(triple.transmission),
        None if triple.reflection is None else fn(triple.reflection))


def random_crop(triple, size, rng):
    """Aligned random square crop; small images are reflect-padded up first."""
    h, w = triple.blended.shape[-2:]
    if h < size or w < size:
        triple = _apply_all(
            triple, lambda img: reflect_pad_to(img, max(h, size), max(w, size)))
        h, w = triple.blended.shape[-2:]
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return _apply_all(triple, lambda img: img[..., top:top + size, left:left + size])


def augment(triple, rng):
    """Horizontal flip with probability 0.5, then a rotation by k*90 degrees,
    k drawn uniformly from {0, 1, 2, 3}; identical for all planes."""
    flip = bool(rng.random() < 0.5)
    quarter_turns = int(rng.integers(0, 4))

    def transform(img):
        if flip:
            img = torch.flip(img, dims=(-1,))
        if quarter_turns:
            img = torch.rot90(img, quarter_turns, dims=(-2, -1))
        return img.contiguous()

    return _apply_all(triple, transform)


def load_image(path):
    """Decode an 8-bit image file into a float32 (3, H, W) tensor in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        array = np.asarray(rgb, dtype=np.float32) / 255.0
    return torch.from_numpy(array).permute(2, 0, 1).contiguous()


def save_image(path, tensor):
    """Write a (3, H, W) tensor in [0, 1] as an 8-bit PNG/JPEG."""
    array = tensor.clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8)
    array = array.permute(1, 2, 0).cpu().numpy()
    Image.fromarray(array).save(path)


def list_images(directory):
    return sorted(
        name for name in os.listdir(directory)
        if os.path.splitext(name)[1].lower() in IMAGE_EXTENSIONS)


class EvalPairs(Sequence):
    """Lazily loaded (blended, truth) pairs from a paired dataset directory,
    sorted by filename."""

    def __init__(self, spec):
        blended_dir = os.path.join(spec.root, spec.blended_dirname)
        truth_dir = os.path.join(spec.root, spec.transmission_dirname)
        for d in (blended_dir, truth_dir):
            if not os.path.isdir(d):
                raise DatasetError(f"missing dataset folder: {d}")
        blended = list_images(blended_dir)
        truth = list_images(truth_dir)
        unmatched = sorted(set(blended) ^ set(truth))
        if unmatched:
            raise DatasetError(
                f"unpaired dataset file(s): {', '.join(unmatched)}")
        if not blended:
            raise DatasetError(f"dataset at {spec.root} is empty")
        self.names = blended
        self._blended_dir = blended_dir
        self._truth_dir = truth_dir

    def __len__(self):
        return len(self.names)

    def __getitem__(self, index):
        name = self.names[index]
        blended = load_image(os.path.join(self._blended_dir, name))
        truth = load_image(os.path.join(self._truth_dir, name))
        if blended.shape != truth.shape:
            raise DatasetError(
                f"{name}: blended {tuple(blended.shape)} vs "
                f"transmission {tuple(truth.shape)}")
        return blended, truth


def load_eval_pairs(spec):
    """Validate a paired dataset directory and return its pairs."""
    return EvalPairs(spec)


def load_training_triples(root):
    """Load a whole paired directory into memory as ReflectionTriples.

    A reflection/ folder is used when present; otherwise the reflection
    plane is left unset.
    """
    pairs = load_eval_pairs(DatasetSpec(root))
    reflection_dir = os.path.join(root, "reflection")
    triples = []
    for index, name in enumerate(pairs.names):
        blended, transmission = pairs[index]
        reflection = None
        candidate = os.path.join(reflection_dir, name)
        if os.path.isfile(candidate):
            reflection = load_image(candidate)
        triples.append(ReflectionTriple(blended, transmission, reflection))
    return triples
