"""Patch decomposition of layer representations and output-shape arithmetic.

Layout conventions (fixed, checkpoints depend on them):

* images are ``H x W x C`` arrays indexed ``[row, col, channel]``;
* patch ``p`` sits at output grid position ``(p // out_W, p % out_W)``,
  i.e. the output grid is scanned row-major;
* a patch is vectorized over ``(patch_row, patch_col, channel)`` with the
  channel index varying fastest.
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import DimensionMismatch, PatchTooLarge


class Shape3(NamedTuple):
    height: int
    width: int
    channels: int


@dataclass(frozen=True)
class PatchConfig:
    patch_h: int
    patch_w: int
    stride: int = 1

    def __post_init__(self):
        if self.patch_h < 1 or self.patch_w < 1:
            raise ValueError("patch dimensions must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    def patch_dim(self, channels):
        return self.patch_h * self.patch_w * channels


def output_shape(in_shape, cfg, out_channels):
    """Shape of the representation produced by sliding ``cfg`` over ``in_shape``.

    Non-exact strides floor the output size.
    """
    H, W, C = in_shape
    if min(H, W, C, out_channels) < 1:
        raise ValueError(f"invalid shapes {in_shape} -> {out_channels} channels")
    if cfg.patch_h > H or cfg.patch_w > W:
        raise PatchTooLarge(f"{cfg.patch_h}x{cfg.patch_w} patch does not fit a {H}x{W} input")
    return Shape3((H - cfg.patch_h) // cfg.stride + 1, (W - cfg.patch_w) // cfg.stride + 1, out_channels)


def extract_patches(img, cfg):
    """Return the ``P x D`` patch matrix of an ``H x W x C`` image.

    A leading batch axis is also accepted, giving ``N x P x D``.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (3, 4):
        raise DimensionMismatch(f"expected H x W x C (or N x H x W x C), got {img.shape}")
    batch = img if img.ndim == 4 else img[None]
    output_shape(batch.shape[1:], cfg, 1)
    out = _kernels.gather_patches(batch, cfg.patch_h, cfg.patch_w, cfg.stride)
    return out if img.ndim == 4 else out[0]


def fold_responses(values, out):
    """Arrange ``P x C`` patch responses into an ``H_out x W_out x C`` tensor."""
    values = np.asarray(values, dtype=np.float64)
    H, W, C = out
    if values.shape[-2:] != (H * W, C):
        raise DimensionMismatch(f"cannot fold {values.shape} into {tuple(out)}")
    return values.reshape(values.shape[:-2] + (H, W, C))
