"""Average-pool image pyramid and the shallow multi-scale encoder.

Images are ``(B, 1, H, W)`` tensors with H and W divisible by 16. The encoder
returns features at 1/4, 1/8 and 1/16 resolution.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ConvBlock, NonFiniteError, PadConv2d

PYRAMID_SCALES = (1, 2, 4, 8, 16)


class SizingError(ValueError):
    pass


class FeatureSet(NamedTuple):
    f4: torch.Tensor
    f8: torch.Tensor
    f16: torch.Tensor


def check_image(image: torch.Tensor) -> None:
    if image.dim() != 4 or image.shape[1] != 1:
        raise SizingError(f"expected a (B, 1, H, W) image tensor, got shape {tuple(image.shape)}")
    h, w = image.shape[-2:]
    for name, size in (("height", h), ("width", w)):
        if size % 16:
            raise SizingError(f"image {name} {size} is not divisible by 16")
    if not torch.isfinite(image).all():
        raise NonFiniteError("image contains non-finite values")


def build_pyramid(image: torch.Tensor) -> dict[int, torch.Tensor]:
    """Levels ``{1, 2, 4, 8, 16}``; each is the 2x2 block mean of the previous."""
    check_image(image)
    levels = {1: image}
    x = image
    for s in PYRAMID_SCALES[1:]:
        x = F.avg_pool2d(x, 2)
        levels[s] = x
    return levels


class ShallowEncoder(nn.Module):
    """Shallow pyramid encoder.

    P1 is reduced to 1/2 by a strided conv block and fused with a block run on
    P2; the result is reduced to 1/4 and fused with a block on P4 to give
    ``f4``. Each coarser feature map concatenates the learned stride-2
    downsampling of the finer map with a conv block on the matching pyramid
    level.
    """

    def __init__(self, stem_channels=32, feat4_channels=48, feat8_channels=128,
                 feat16_channels=256):
        super().__init__()
        c1, c4, c8, c16 = stem_channels, feat4_channels, feat8_channels, feat16_channels
        self.block1 = ConvBlock(1, c1, stride=2)
        self.block2 = ConvBlock(1, c1)
        self.fuse2 = ConvBlock(2 * c1, c4, stride=2)
        self.block4 = ConvBlock(1, c4)
        self.fuse4 = ConvBlock(2 * c4, c4)

        self.down4 = PadConv2d(c4, c4, 3, stride=2)
        self.block8 = ConvBlock(1, c4)
        self.fuse8 = ConvBlock(2 * c4, c8)

        self.down8 = PadConv2d(c8, c8, 3, stride=2)
        self.block16 = ConvBlock(1, c8)
        self.fuse16 = ConvBlock(2 * c8, c16)

        self.out_channels = (c4, c8, c16)

    def forward(self, image: torch.Tensor) -> FeatureSet:
        p = build_pyramid(image)
        x = self.fuse2(torch.cat([self.block1(p[1]), self.block2(p[2])], 1))
        f4 = self.fuse4(torch.cat([x, self.block4(p[4])], 1))
        f8 = self.fuse8(torch.cat([self.down4(f4), self.block8(p[8])], 1))
        f16 = self.fuse16(torch.cat([self.down8(f8), self.block16(p[16])], 1))
        return FeatureSet(f4, f8, f16)


def encode(encoder: ShallowEncoder, image: torch.Tensor) -> FeatureSet:
    return encoder(image)


def encode_pair(encoder: ShallowEncoder, left: torch.Tensor, right: torch.Tensor):
    """Encode both views with the same weights.

    The views run as separate forward calls so batch-statistics normalization
    never mixes them; the result is identical to two ``encode`` calls.
    """
    if left.shape != right.shape:
        raise SizingError(f"left/right shape mismatch: {tuple(left.shape)} vs {tuple(right.shape)}")
    return encoder(left), encoder(right)
