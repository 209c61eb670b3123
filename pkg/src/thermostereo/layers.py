"""Convolution building blocks shared by the network modules.

All convolutions pad explicitly with reflection. When a feature map is too
small to reflect (padding >= size along some axis, which happens for the large
attention kernels at 1/16 scale), replicate padding is used instead.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class NonFiniteError(ValueError):
    """A tensor that must be finite holds NaN or inf."""


def pad_reflect(x: torch.Tensor, pad: tuple[int, ...]) -> torch.Tensor:
    """Reflect-pad ``x`` with a replicate fallback for undersized maps.

    ``pad`` uses the ``F.pad`` ordering (last dim first, pairs of lo/hi).
    """
    if not any(pad):
        return x
    sizes = x.shape[::-1][: len(pad) // 2]
    fits = all(max(pad[2 * i], pad[2 * i + 1]) < s for i, s in enumerate(sizes))
    return F.pad(x, pad, mode="reflect" if fits else "replicate")


class PadConv2d(nn.Conv2d):
    """``nn.Conv2d`` with 'same'-style reflect padding applied in forward."""

    def __init__(self, in_ch, out_ch, kernel_size, stride=1, groups=1, bias=True):
        super().__init__(in_ch, out_ch, kernel_size, stride=stride, padding=0,
                         groups=groups, bias=bias)
        k = self.kernel_size
        self._pad = (k[1] // 2, k[1] // 2, k[0] // 2, k[0] // 2)

    def forward(self, x):
        x = pad_reflect(x, self._pad)
        if self.groups > 1:
            # depthwise kernels run markedly faster channels-last on CPU
            x = x.contiguous(memory_format=torch.channels_last)
            return super().forward(x).contiguous()
        return super().forward(x)


class PadConv3d(nn.Conv3d):
    def __init__(self, in_ch, out_ch, kernel_size, stride=1, groups=1, bias=True):
        super().__init__(in_ch, out_ch, kernel_size, stride=stride, padding=0,
                         groups=groups, bias=bias)
        k = self.kernel_size
        self._pad = (k[2] // 2, k[2] // 2, k[1] // 2, k[1] // 2, k[0] // 2, k[0] // 2)

    def forward(self, x):
        x = pad_reflect(x, self._pad)
        if self.groups > 1:
            x = x.contiguous(memory_format=torch.channels_last_3d)
            return super().forward(x).contiguous()
        return super().forward(x)


def activation() -> nn.Module:
    # smooth, act(0) == 0
    return nn.SiLU()


class ConvBlock(nn.Sequential):
    """Two [3x3 conv, BatchNorm, SiLU] stages; the first may be strided."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__(
            PadConv2d(in_ch, out_ch, 3, stride=stride, bias=False),
            nn.BatchNorm2d(out_ch),
            activation(),
            PadConv2d(out_ch, out_ch, 3, bias=False),
            nn.BatchNorm2d(out_ch),
            activation(),
        )


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
