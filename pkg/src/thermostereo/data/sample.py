"""Stereo sample container and tensor conversion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .codecs import DisparityMap, normalize_minmax


@dataclass
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    gt: DisparityMap | None = None
    condition_tag: str = "all"
    id: str = ""
    occlusion: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(f"{self.id}: left/right dims differ: {self.left.shape} vs {self.right.shape}")
        if self.gt is not None and self.gt.shape != self.left.shape:
            raise ValueError(f"{self.id}: gt dims {self.gt.shape} differ from image dims {self.left.shape}")

    @property
    def shape(self):
        return self.left.shape


def pad_amounts(h: int, w: int, multiple: int = 16) -> tuple[int, int]:
    """Bottom/right padding that makes ``(h, w)`` divisible by ``multiple``."""
    return (-h) % multiple, (-w) % multiple


def pad_image(image: np.ndarray, multiple: int = 16) -> tuple[np.ndarray, tuple[int, int]]:
    ph, pw = pad_amounts(*image.shape, multiple)
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw)), mode="edge")
    return image, (ph, pw)


@dataclass
class SampleTensors:
    left: torch.Tensor  # (1, H', W') normalized, padded
    right: torch.Tensor
    gt: torch.Tensor  # (1, H', W'); zeros where absent
    valid: torch.Tensor  # (1, H', W') bool; padding is invalid
    pad: tuple[int, int]
    id: str
    condition_tag: str


def to_tensors(sample: StereoSample, multiple: int = 16) -> SampleTensors:
    """Normalize both views to [0, 1], pad to ``multiple`` and record the pad."""
    left, pad = pad_image(normalize_minmax(sample.left), multiple)
    right, _ = pad_image(normalize_minmax(sample.right), multiple)
    h, w = sample.shape
    gt = np.zeros(left.shape, np.float32)
    valid = np.zeros(left.shape, bool)
    if sample.gt is not None:
        gt[:h, :w] = np.where(sample.gt.valid, sample.gt.data, 0)
        valid[:h, :w] = sample.gt.valid
    t = lambda a: torch.from_numpy(np.ascontiguousarray(a))[None]
    return SampleTensors(t(left), t(right), t(gt), t(valid), pad, sample.id, sample.condition_tag)


def crop_pad(x: torch.Tensor | np.ndarray, pad: tuple[int, int]):
    ph, pw = pad
    h, w = x.shape[-2:]
    return x[..., : h - ph, : w - pw]
