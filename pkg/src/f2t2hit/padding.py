"""Reflection padding that tolerates pads larger than the input."""

import torch.nn.functional as F

from .errors import ShapeError


def reflect_pad_to(x, target_h, target_w):
    """Reflect-pad the bottom/right edges of (..., H, W) up to a target size.

    torch only reflects by less than the dimension size per call, so large
    pads are applied in steps.
    """
    if x.shape[-2] > target_h or x.shape[-1] > target_w:
        raise ShapeError(
            f"input {tuple(x.shape[-2:])} larger than pad target {(target_h, target_w)}"
        )
    while x.shape[-2] < target_h or x.shape[-1] < target_w:
        dh = min(target_h - x.shape[-2], x.shape[-2] - 1)
        dw = min(target_w - x.shape[-1], x.shape[-1] - 1)
        if (x.shape[-2] < target_h and dh == 0) or (x.shape[-1] < target_w and dw == 0):
            raise ShapeError("cannot reflect-pad a dimension of size 1")
        x = F.pad(x, (0, dw, 0, dh), mode="reflect")
    return x


def pad_to_multiple(x, multiple):
    """Reflect-pad (..., H, W) so both spatial dims are multiples of `multiple`."""
    h, w = x.shape[-2:]
    target_h = -(-h // multiple) * multiple
    target_w = -(-w // multiple) * multiple
    if (target_h, target_w) == (h, w):
        return x
    return reflect_pad_to(x, target_h, target_w)
