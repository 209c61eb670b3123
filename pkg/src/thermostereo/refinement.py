"""Single-pass disparity refinement and convex upsampling."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import PadConv2d, activation, pad_reflect


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class MergeCNN(nn.Module):
    """Fuse 1/4 features with bilinearly upsampled 1/8 features."""

    def __init__(self, feat4_channels: int, feat8_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = PadConv2d(feat4_channels + feat8_channels, out_channels, 3, bias=False)
        self.norm1 = nn.BatchNorm2d(out_channels)
        self.act = activation()
        self.conv2 = PadConv2d(out_channels, out_channels, 3)

    def forward(self, f4, f8):
        x = torch.cat([f4, upsample2x(f8)], 1)
        return self.conv2(self.act(self.norm1(self.conv1(x))))


def merge_features(f4, f8, module: MergeCNN) -> torch.Tensor:
    return module(f4, f8)


def warp(f_right: torch.Tensor, disp: torch.Tensor, return_mask: bool = False):
    """Resample ``f_right`` at ``x - disp`` with linear interpolation along x.

    Output columns whose source position is negative are zero. With
    ``return_mask`` also returns the boolean in-frame mask ``(B, 1, h, w)``.
    """
    if disp.dim() == 3:
        disp = disp.unsqueeze(1)
    if disp.shape[-2:] != f_right.shape[-2:]:
        raise ValueError("disparity and feature map differ in spatial shape")
    if (disp < 0).any():
        raise ValueError("warp requires non-negative disparities")
    b, c, h, w = f_right.shape
    xs = torch.arange(w, dtype=disp.dtype, device=disp.device).view(1, 1, 1, w)
    src = xs - disp
    x0 = torch.floor(src)
    frac = src - x0
    x0 = x0.long()
    x1 = x0 + 1

    def gather(idx):
        ok = (idx >= 0) & (idx < w)
        g = torch.gather(f_right, 3, idx.clamp(0, w - 1).expand(b, c, h, w))
        return g * ok

    out = gather(x0) * (1 - frac) + gather(x1) * frac
    in_frame = src >= 0
    out = out * in_frame
    return (out, in_frame) if return_mask else out


def correlation_attention(f_left: torch.Tensor, warped: torch.Tensor, radius: int = 4) -> torch.Tensor:
    """Horizontal local correlation, ``2 * radius + 1`` channels.

    Channel ``k`` holds ``<f_left(x, y), warped(x + k - radius, y)> / C``;
    offsets falling outside the map contribute 0.
    """
    if f_left.shape != warped.shape:
        raise ValueError("correlation inputs must share a shape")
    w = f_left.shape[-1]
    padded = F.pad(warped, (radius, radius))
    out = [(f_left * padded[..., k:k + w]).mean(1) for k in range(2 * radius + 1)]
    return torch.stack(out, 1)


class RefineHead(nn.Module):
    """Dual-kernel decoder blended by a channel attention weight.

    Emits the disparity residual and the convex-upsampling mask logits. Both
    output convolutions are zero-initialized so the head starts as a no-op.
    """

    def __init__(self, in_channels: int, channels: int, upsample_factor: int = 4):
        super().__init__()
        self.branch1 = nn.Sequential(nn.Conv2d(in_channels, channels, 1), activation())
        self.branch3 = nn.Sequential(PadConv2d(in_channels, channels, 3), activation())
        hidden = max(channels // 4, 1)
        self.attn_fc1 = nn.Linear(in_channels, hidden)
        self.attn_fc2 = nn.Linear(hidden, channels)
        self.trunk = nn.Sequential(PadConv2d(channels, channels, 3), activation())
        self.delta = PadConv2d(channels, 1, 3)
        self.mask = nn.Conv2d(channels, 9 * upsample_factor ** 2, 1)
        for conv in (self.delta, self.mask):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def blend_weight(self, f_concat):
        s = f_concat.mean((2, 3))
        return torch.sigmoid(self.attn_fc2(F.relu(self.attn_fc1(s))))[..., None, None]

    def blend(self, f_concat, w_attn=None):
        if w_attn is None:
            w_attn = self.blend_weight(f_concat)
        return w_attn * self.branch1(f_concat) + (1 - w_attn) * self.branch3(f_concat)

    def forward(self, f_concat, w_attn=None):
        x = self.trunk(self.blend(f_concat, w_attn))
        return self.delta(x), self.mask(x)


def mask_softmax(mask_logits: torch.Tensor, factor: int = 4) -> torch.Tensor:
    b, _, h, w = mask_logits.shape
    m = mask_logits.view(b, 9, factor, factor, h, w)
    return torch.softmax(m, dim=1).view(b, 9 * factor * factor, h, w)


def convex_upsample(disp: torch.Tensor, mask: torch.Tensor, factor: int = 4,
                    atol: float = 1e-5) -> torch.Tensor:
    """Full-resolution disparity as per-pixel convex combinations.

    ``mask`` is ``(B, 9 * factor**2, h, w)`` laid out as (neighbor, sub-row,
    sub-col) and must already be normalized over the 9 neighbors. Neighborhoods
    are taken with replicate padding, and the result is scaled by ``factor``
    to convert quarter-resolution pixel units.
    """
    b, _, h, w = disp.shape
    m = mask.view(b, 1, 9, factor, factor, h, w)
    sums = m.sum(2)
    if (sums - 1).abs().max() > atol or (m < 0).any():
        raise ValueError("upsample mask is not normalized over the 3x3 neighborhood")
    nb = F.unfold(F.pad(disp, (1, 1, 1, 1), mode="replicate"), 3)
    nb = nb.view(b, 1, 9, 1, 1, h, w)
    up = (m * nb).sum(2) * factor  # b, 1, f, f, h, w
    return up.permute(0, 1, 4, 2, 5, 3).reshape(b, 1, factor * h, factor * w)


def bilinear_upsample(disp: torch.Tensor, factor: int = 4) -> torch.Tensor:
    return factor * F.interpolate(disp, scale_factor=factor, mode="bilinear", align_corners=False)


class Refinement(nn.Module):
    def __init__(self, feat4_channels, feat8_channels, merge_channels=64, refine_channels=160,
                 corr_radius=4, upsample_factor=4):
        super().__init__()
        self.merge = MergeCNN(feat4_channels, feat8_channels, merge_channels)
        self.corr_radius = corr_radius
        self.factor = upsample_factor
        in_ch = merge_channels + 1 + 2 * corr_radius + 1
        self.head = RefineHead(in_ch, refine_channels, upsample_factor)

    def forward(self, feats_left, feats_right, d_init):
        """Returns ``(d_delta, mask)`` with ``mask`` already normalized."""
        fl = self.merge(feats_left.f4, feats_left.f8)
        fr = self.merge(feats_right.f4, feats_right.f8)
        w_corr = correlation_attention(fl, warp(fr, d_init), self.corr_radius)
        f_concat = torch.cat([fl, d_init, w_corr], 1)
        d_delta, mask_logits = self.head(f_concat)
        return d_delta, mask_softmax(mask_logits, self.factor)


def refine_disparity(f_l_merge, d_init, w_corr, head: RefineHead, factor: int = 4):
    f_concat = torch.cat([f_l_merge, d_init, w_corr], 1)
    d_delta, mask_logits = head(f_concat)
    return d_delta, mask_softmax(mask_logits, factor)
