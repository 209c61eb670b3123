"""Correlation cost volume and soft-argmin disparity regression."""

from __future__ import annotations

import torch

from .layers import NonFiniteError


def build_correlation_volume(f_left: torch.Tensor, f_right: torch.Tensor,
                             d_levels: int) -> torch.Tensor:
    """Channel-normalized inner product for every disparity hypothesis.

    ``C[b, d, y, x] = <f_left[b, :, y, x], f_right[b, :, y, x - d]> / C``.
    Hypotheses whose right-view column falls outside the image (``x - d < 0``)
    score 0. Returns ``(B, d_levels, h, w)``.
    """
    if f_left.shape != f_right.shape:
        raise ValueError(f"feature shape mismatch: {tuple(f_left.shape)} vs {tuple(f_right.shape)}")
    if d_levels < 1:
        raise ValueError("d_levels must be >= 1")
    b, c, h, w = f_left.shape
    volume = f_left.new_zeros(b, d_levels, h, w)
    for d in range(min(d_levels, w)):
        if d == 0:
            volume[:, 0] = (f_left * f_right).mean(1)
        else:
            volume[:, d, :, d:] = (f_left[..., d:] * f_right[..., :-d]).mean(1)
    return volume


def disparity_probabilities(costs: torch.Tensor) -> torch.Tensor:
    return torch.softmax(costs, dim=1)


def soft_argmin(costs: torch.Tensor) -> torch.Tensor:
    """Expected disparity under ``softmax(costs)`` along dim 1.

    Returns ``(B, 1, h, w)`` in quarter-resolution pixel units, bounded by
    ``[0, d_levels - 1]``.
    """
    if not torch.isfinite(costs).all():
        raise NonFiniteError("cost volume contains non-finite values")
    prob = disparity_probabilities(costs)
    levels = torch.arange(costs.shape[1], dtype=costs.dtype, device=costs.device)
    return (prob * levels.view(1, -1, 1, 1)).sum(1, keepdim=True)
