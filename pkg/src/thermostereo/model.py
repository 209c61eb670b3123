"""Full stereo network assembled from the encoder, cost volume, aggregation and refinement."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .aggregation import Aggregation, CrossAttention16, MSCAttention
from .config import ModelConfig
from .cost_volume import build_correlation_volume, soft_argmin
from .encoder import ShallowEncoder, check_image, encode_pair
from .layers import count_parameters
from .refinement import Refinement, bilinear_upsample, convex_upsample


@dataclass
class StereoOutput:
    d_init: torch.Tensor  # quarter resolution, quarter-res pixel units
    d_final: torch.Tensor  # full resolution, full-res pixel units
    predictions: list[torch.Tensor]  # full-res sequence supervised by the loss
    cost: torch.Tensor
    d_delta: torch.Tensor | None = None
    mask: torch.Tensor | None = None


class ThermalStereoNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        cfg.validate()
        self.encoder = ShallowEncoder(cfg.stem_channels, cfg.feat4_channels,
                                      cfg.feat8_channels, cfg.feat16_channels)
        self.cross_attn = CrossAttention16(cfg.feat16_channels, cfg.attn_dim)
        self.msc = MSCAttention(self.encoder.out_channels, cfg.volume_channels)
        self.aggregation = Aggregation(cfg.volume_channels, cfg.blocks_per_scale,
                                       cfg.expand_ratio, cfg.use_se, cfg.se_reduction)
        self.refinement = (
            Refinement(cfg.feat4_channels, cfg.feat8_channels, cfg.merge_channels,
                       cfg.refine_channels, cfg.corr_radius, cfg.upsample_factor)
            if cfg.use_refine else None)

    @property
    def n_params(self) -> int:
        return count_parameters(self)

    def forward(self, left: torch.Tensor, right: torch.Tensor) -> StereoOutput:
        check_image(left)
        check_image(right)
        fl, fr = encode_pair(self.encoder, left, right)
        cost = build_correlation_volume(fl.f4, fr.f4, self.config.d_levels)
        f_cross = self.cross_attn(fl.f16, fr.f16)
        attn = self.msc(fl.f4, fl.f8, f_cross)
        c_refine = self.aggregation(cost, attn)
        d_init = soft_argmin(c_refine)

        if self.refinement is None:
            d_final = bilinear_upsample(d_init, self.config.upsample_factor)
            return StereoOutput(d_init, d_final, [d_final], c_refine)

        d_delta, mask = self.refinement(fl, fr, d_init)
        up_init = convex_upsample(d_init, mask)
        d_final = convex_upsample(d_init + d_delta, mask)
        return StereoOutput(d_init, d_final, [up_init, d_final], c_refine, d_delta, mask)


def build_model(config: ModelConfig | None = None) -> ThermalStereoNet:
    return ThermalStereoNet(config)
