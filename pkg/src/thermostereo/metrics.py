"""Sequence loss, EPE / outlier metrics and error-map rendering."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.5, 1.0)


def valid_mask(gt: torch.Tensor, d_max: float, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Pixels usable for supervision: ``0 < gt < d_max`` and the explicit mask, if any."""
    valid = (gt > 0) & (gt < d_max) & torch.isfinite(gt)
    if mask is not None:
        valid &= mask.bool()
    return valid


@dataclass
class LossReport:
    total: torch.Tensor
    per_prediction: list[float]
    valid_pixel_count: int
    weights: list[float] = field(default_factory=list)


def sequence_loss(predictions: list[torch.Tensor], gt: torch.Tensor, valid: torch.Tensor,
                  gamma: float = 0.9) -> LossReport:
    """``sum_i gamma**(N - i) * mean_valid |gt - pred_i|`` over the prediction sequence.

    Predictions are ordered coarse to fine, so the last one carries weight 1.
    A batch without valid pixels yields a zero loss (still attached to the
    graph) and a warning instead of NaN.
    """
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    n = len(predictions)
    for p in predictions:
        if p.shape != gt.shape:
            raise ValueError(f"prediction shape {tuple(p.shape)} != gt shape {tuple(gt.shape)}")
    count = int(valid.sum())
    weights = [gamma ** (n - i - 1) for i in range(n)]
    if count == 0:
        warnings.warn("no valid ground-truth pixels; sample skipped", RuntimeWarning, stacklevel=2)
        zero = sum(p.sum() * 0.0 for p in predictions)
        return LossReport(zero, [0.0] * n, 0, weights)
    terms = [(gt - p).abs()[valid].mean() for p in predictions]
    total = sum(w * t for w, t in zip(weights, terms))
    return LossReport(total, [float(t.detach()) for t in terms], count, weights)


def _key(threshold: float) -> str:
    return f"{threshold:g}"


@dataclass
class MetricReport:
    """Sufficient statistics for EPE and outlier rates.

    Holds sums and counts rather than ratios so reports merge associatively.
    """

    abs_err_sum: float = 0.0
    n_pixels: int = 0
    outlier_counts: dict[str, int] = field(default_factory=dict)
    sample_count: int = 0
    condition_tag: str = "all"

    @property
    def epe(self) -> float:
        return self.abs_err_sum / self.n_pixels if self.n_pixels else float("nan")

    @property
    def outlier_rates(self) -> dict[str, float]:
        if not self.n_pixels:
            return {k: float("nan") for k in self.outlier_counts}
        return {k: 100.0 * v / self.n_pixels for k, v in self.outlier_counts.items()}

    def merge(self, other: "MetricReport", tag: str | None = None) -> "MetricReport":
        keys = set(self.outlier_counts) | set(other.outlier_counts)
        if self.sample_count and other.sample_count and set(self.outlier_counts) != set(other.outlier_counts):
            raise ValueError("cannot merge reports with different thresholds")
        return MetricReport(
            self.abs_err_sum + other.abs_err_sum,
            self.n_pixels + other.n_pixels,
            {k: self.outlier_counts.get(k, 0) + other.outlier_counts.get(k, 0) for k in sorted(keys)},
            self.sample_count + other.sample_count,
            tag if tag is not None else self.condition_tag,
        )

    def to_json(self) -> dict:
        return {
            "epe": self.epe,
            "outliers": self.outlier_rates,
            "n_samples": self.sample_count,
            "condition": self.condition_tag,
            "n_pixels": self.n_pixels,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MetricReport":
        n = int(d.get("n_pixels", 0))
        rates = d["outliers"]
        return cls(float(d["epe"]) * n, n, {k: round(v * n / 100.0) for k, v in rates.items()},
                   int(d["n_samples"]), d["condition"])


METRIC_SCHEMA = {
    "type": "object",
    "required": ["epe", "outliers", "n_samples", "condition"],
    "properties": {
        "epe": {"type": "number", "minimum": 0},
        "outliers": {
            "type": "object",
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 100},
        },
        "n_samples": {"type": "integer", "minimum": 0},
        "condition": {"type": "string"},
        "n_pixels": {"type": "integer", "minimum": 0},
    },
}


def compute_metrics(pred, gt, valid, thresholds=DEFAULT_THRESHOLDS, d_max: float | None = None,
                    condition_tag: str = "all") -> MetricReport:
    """EPE and ``>n`` outlier counts over valid pixels.

    Accepts numpy arrays or tensors. Predictions are clamped to ``[0, d_max]``
    (or just at 0 when ``d_max`` is None) before the error is taken.
    """
    pred, gt, valid = (np.asarray(t.detach().cpu() if torch.is_tensor(t) else t) for t in (pred, gt, valid))
    if pred.shape != gt.shape or valid.shape != gt.shape:
        raise ValueError("pred, gt and valid must share a shape")
    valid = valid.astype(bool)
    if not valid.any():
        warnings.warn("no valid ground-truth pixels; sample skipped", RuntimeWarning, stacklevel=2)
        return MetricReport(outlier_counts={_key(t): 0 for t in thresholds}, condition_tag=condition_tag)
    p = np.clip(pred.astype(np.float64), 0, np.inf if d_max is None else d_max)
    err = np.abs(p - gt.astype(np.float64))[valid]
    return MetricReport(
        float(err.sum()), int(err.size),
        {_key(t): int((err > t).sum()) for t in thresholds},
        1, condition_tag)


def save_report(report: MetricReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2))


# Colormap: piecewise-linear blue -> cyan -> yellow -> red over [0, 1].
COLORMAP_STOPS = np.array([
    [0.0, 0, 0, 255],
    [1 / 3, 0, 255, 255],
    [2 / 3, 255, 255, 0],
    [1.0, 255, 0, 0],
])
COLORMAP_DOC = "error colormap: linear RGB stops blue(0)-cyan(1/3)-yellow(2/3)-red(1); value=clip(|err|/err_max,0,1); invalid=black"


def colormap(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to uint8 RGB along ``COLORMAP_STOPS``."""
    v = np.clip(values, 0.0, 1.0)
    rgb = np.stack([np.interp(v, COLORMAP_STOPS[:, 0], COLORMAP_STOPS[:, c]) for c in (1, 2, 3)], -1)
    return np.rint(rgb).astype(np.uint8)


def render_error_map(pred, gt, valid, out_path, err_max: float = 3.0) -> np.ndarray:
    """Write the color-coded absolute error as a PNG; returns the RGB array.

    The colormap definition is stored in the PNG's text metadata.
    """
    from PIL import Image, PngImagePlugin

    pred, gt, valid = (np.asarray(t.detach().cpu() if torch.is_tensor(t) else t) for t in (pred, gt, valid))
    err = np.abs(np.clip(pred, 0, None) - gt)
    rgb = colormap(err / err_max)
    rgb[~valid.astype(bool)] = 0
    info = PngImagePlugin.PngInfo()
    info.add_text("colormap", COLORMAP_DOC)
    info.add_text("err_max", f"{err_max:g}")
    Image.fromarray(rgb, "RGB").save(out_path, pnginfo=info)
    return rgb
