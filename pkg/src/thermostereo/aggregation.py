"""Cost aggregation with attention gating.

The correlation volume ``(B, D, h, w)`` is lifted to a 5-D activation
``(B, C, D, h, w)`` and regularized by an hourglass of 3-D inverted-residual
blocks. Attention logits from the left features modulate the encoder stage at
each scale through a sigmoid gate broadcast over the disparity axis.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import PadConv2d, PadConv3d, activation


class AttentionMaps(NamedTuple):
    a4: torch.Tensor
    a8: torch.Tensor
    a16: torch.Tensor


class SqueezeExcite(nn.Module):
    """Channel gate: global average pool, bottleneck, sigmoid, rescale.

    Works on any ``(B, C, ...)`` activation.
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if channels < reduction:
            raise ValueError(f"SE needs channels >= reduction ({channels} < {reduction})")
        hidden = channels // reduction
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        s = x.flatten(2).mean(-1)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        g = self.gate(x)
        return x * g.view(*g.shape, *([1] * (x.dim() - 2)))


def se_gate(volume: torch.Tensor, se: SqueezeExcite | None) -> torch.Tensor:
    """Apply ``se``; a disabled gate (``None``) is the identity."""
    return volume if se is None else se(volume)


class InvertedResidual3d(nn.Module):
    """MobileNetV3-style block: 1x1x1 expand, 3x3x3 depthwise, SE, 1x1x1 project."""

    def __init__(self, in_ch, out_ch, stride=1, expand_ratio=4, use_se=True, se_reduction=4):
        super().__init__()
        mid = in_ch * expand_ratio
        self.expand = nn.Sequential(
            nn.Conv3d(in_ch, mid, 1, bias=False), nn.BatchNorm3d(mid), activation())
        self.depthwise = nn.Sequential(
            PadConv3d(mid, mid, 3, stride=stride, groups=mid, bias=False),
            nn.BatchNorm3d(mid), activation())
        self.se = SqueezeExcite(mid, se_reduction) if use_se else None
        self.project = nn.Sequential(nn.Conv3d(mid, out_ch, 1, bias=False), nn.BatchNorm3d(out_ch))
        self.residual = stride == 1 and in_ch == out_ch

    def forward(self, x):
        y = self.project(se_gate(self.depthwise(self.expand(x)), self.se))
        return x + y if self.residual else y


class CrossAttention16(nn.Module):
    """Single-head global cross-attention at 1/16 scale.

    Queries come from the left features, keys and values from the right; the
    attended values are added back onto the left features.
    """

    def __init__(self, channels: int, attn_dim: int):
        super().__init__()
        self.query = nn.Conv2d(channels, attn_dim, 1)
        self.key = nn.Conv2d(channels, attn_dim, 1)
        self.value = nn.Conv2d(channels, channels, 1)

    def attention_weights(self, f_l16, f_r16):
        q = self.query(f_l16).flatten(2).transpose(1, 2)  # B, N, A
        k = self.key(f_r16).flatten(2)  # B, A, N
        return torch.softmax(q @ k / math.sqrt(q.shape[-1]), dim=-1)

    def forward(self, f_l16, f_r16):
        if f_l16.shape != f_r16.shape:
            raise ValueError("cross-attention inputs must share a shape")
        attn = self.attention_weights(f_l16, f_r16)
        v = self.value(f_r16).flatten(2).transpose(1, 2)  # B, N, C
        out = (attn @ v).transpose(1, 2).reshape(f_l16.shape)
        return f_l16 + out


def cross_attention_16(f_l16, f_r16, module: CrossAttention16):
    return module(f_l16, f_r16)


MSC_KERNELS = (1, 7, 11, 21)


class MultiScaleConv(nn.Module):
    """Parallel 1x1 / 7x7 / 11x11 / 21x21 convolutions, summed and projected.

    The 1x1 branch is dense; the large kernels are depthwise.
    """

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.branches = nn.ModuleList(
            [PadConv2d(in_ch, in_ch, k, groups=1 if k == 1 else in_ch) for k in MSC_KERNELS])
        self.proj = nn.Conv2d(in_ch, out_ch, 1)

    def mixed(self, x):
        return sum(b(x) for b in self.branches)

    def forward(self, x):
        return self.proj(self.mixed(x))


class MSCAttention(nn.Module):
    def __init__(self, feat_channels: tuple[int, int, int], volume_channels: tuple[int, int, int]):
        super().__init__()
        self.msc = nn.ModuleList(
            [MultiScaleConv(f, v) for f, v in zip(feat_channels, volume_channels)])

    def forward(self, f_l4, f_l8, f_cross16) -> AttentionMaps:
        return AttentionMaps(*(m(f) for m, f in zip(self.msc, (f_l4, f_l8, f_cross16))))


def msc_attention(f_l4, f_l8, f_cross16, module: MSCAttention) -> AttentionMaps:
    return module(f_l4, f_l8, f_cross16)


def apply_attention(volume: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Gate ``(B, C, D, h, w)`` by ``sigmoid(logits)`` of shape ``(B, C, h, w)``."""
    if logits.shape[-2:] != volume.shape[-2:] or logits.shape[1] != volume.shape[1]:
        raise ValueError(
            f"attention {tuple(logits.shape)} does not match volume stage {tuple(volume.shape)}")
    return volume * torch.sigmoid(logits).unsqueeze(2)


class Aggregation(nn.Module):
    """Three-scale hourglass over (disparity, y, x).

    Encoder stages at 1/4, 1/8, 1/16 image scale each hold ``blocks_per_scale``
    inverted-residual blocks (the first of the 1/8 and 1/16 stages strided) and
    are gated by the matching attention map. The decoder upsamples trilinearly
    and adds the 1/8 and 1/4 encoder outputs as residual skips.
    """

    def __init__(self, volume_channels=(8, 32, 96), blocks_per_scale=2, expand_ratio=4,
                 use_se=True, se_reduction=4):
        super().__init__()
        c4, c8, c16 = volume_channels
        kw = dict(expand_ratio=expand_ratio, use_se=use_se, se_reduction=se_reduction)

        def stage(cin, cout, stride):
            blocks = [InvertedResidual3d(cin, cout, stride=stride, **kw)]
            blocks += [InvertedResidual3d(cout, cout, **kw) for _ in range(blocks_per_scale - 1)]
            return nn.Sequential(*blocks)

        self.lift = nn.Sequential(nn.Conv3d(1, c4, 1, bias=False), nn.BatchNorm3d(c4), activation())
        self.enc4 = stage(c4, c4, 1)
        self.enc8 = stage(c4, c8, 2)
        self.enc16 = stage(c8, c16, 2)
        self.up16 = nn.Sequential(nn.Conv3d(c16, c8, 1, bias=False), nn.BatchNorm3d(c8))
        self.dec8 = InvertedResidual3d(c8, c8, **kw)
        self.up8 = nn.Sequential(nn.Conv3d(c8, c4, 1, bias=False), nn.BatchNorm3d(c4))
        self.dec4 = InvertedResidual3d(c4, c4, **kw)
        # no bias: a constant cost offset cannot move the soft argmin
        self.collapse = nn.Conv3d(c4, 1, 1, bias=False)

    def forward(self, c_corr: torch.Tensor, attn: AttentionMaps) -> torch.Tensor:
        x = self.lift(c_corr.unsqueeze(1))
        x4 = apply_attention(self.enc4(x), attn.a4)
        x8 = apply_attention(self.enc8(x4), attn.a8)
        x16 = apply_attention(self.enc16(x8), attn.a16)

        y = F.interpolate(self.up16(x16), size=x8.shape[2:], mode="trilinear", align_corners=False)
        y = self.dec8(y + x8)
        y = F.interpolate(self.up8(y), size=x4.shape[2:], mode="trilinear", align_corners=False)
        y = self.dec4(y + x4)
        return self.collapse(y).squeeze(1)


def aggregate(c_corr: torch.Tensor, attn: AttentionMaps, module: Aggregation) -> torch.Tensor:
    return module(c_corr, attn)
