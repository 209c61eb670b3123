"""Synthetic thermal stereo scenes with dense ground truth.

A scene is a stack of layers defined in left-image coordinates: a textured
background "temperature" field on a slanted disparity plane plus
constant-intensity ellipses and rectangles, each on its own disparity plane.
The left view composites the layers by largest disparity. The right view
inverse-maps every right pixel through each layer's plane
(``x_left = (x_right + a + c*y) / (1 - b)`` for ``d = a + b*x + c*y``), samples
the layer there and again keeps the largest disparity. Both views are then
blurred and get independent Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .sample import StereoSample
from .codecs import DisparityMap


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    n_objects: int = 6
    disparity_range: tuple[float, float] = (2.0, 40.0)
    noise_sigma: float = 0.1
    blur_radius: float = 0.8
    sparsity: float = 1.0
    texture_amplitude: float = 1.5
    contrast: float = 1.0
    condition_tag: str = "day"
    d_max: int = 192

    def __post_init__(self):
        self.disparity_range = tuple(float(v) for v in self.disparity_range)
        lo, hi = self.disparity_range
        if not 0 < self.sparsity <= 1:
            raise ValueError(f"sparsity must be in (0, 1], got {self.sparsity}")
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid disparity range {self.disparity_range}")
        if hi > self.d_max:
            raise ValueError(f"disparity range max {hi} exceeds d_max {self.d_max}")
        if self.n_objects < 0 or self.noise_sigma < 0 or self.blur_radius < 0:
            raise ValueError("n_objects, noise_sigma and blur_radius must be non-negative")


@dataclass
class _Layer:
    plane: tuple[float, float, float]  # d = a + b*x + c*y
    kind: str  # background / ellipse / rect
    intensity: float = 0.0
    geom: tuple[float, ...] = ()

    def disparity(self, x, y):
        a, b, c = self.plane
        return a + b * x + c * y

    def covers(self, x, y):
        if self.kind == "background":
            return np.ones(np.broadcast(x, y).shape, bool)
        cx, cy, rx, ry, theta = self.geom
        ct, st = math.cos(theta), math.sin(theta)
        u = (x - cx) * ct + (y - cy) * st
        v = -(x - cx) * st + (y - cy) * ct
        if self.kind == "ellipse":
            return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        return (np.abs(u) <= rx) & (np.abs(v) <= ry)

    def source_x(self, x_right, y):
        a, b, c = self.plane
        return (x_right + a + c * y) / (1.0 - b)


def _smooth_noise(rng, shape, sigma):
    f = gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return f / (f.std() + 1e-12)


def _build_layers(spec: SyntheticSceneSpec, rng, h, w):
    lo, hi = spec.disparity_range
    span = hi - lo
    # background: lower part of the range, nearer towards the image bottom
    bg_top = lo + 0.35 * span
    a_bg = lo + rng.uniform(0.05, 0.1) * span
    c_bg = (bg_top - a_bg) * rng.uniform(0.5, 1.0) / max(h - 1, 1)
    b_bg = rng.uniform(-0.03, 0.03) * span / max(w, 1)
    layers = [_Layer((a_bg, b_bg, c_bg), "background")]
    for _ in range(spec.n_objects):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        rx = rng.uniform(0.06, 0.22) * w
        ry = rng.uniform(0.08, 0.3) * h
        theta = rng.uniform(-0.6, 0.6)
        d_center = rng.uniform(bg_top + 0.05 * span, hi - 0.05 * span) if span > 0 else lo
        b = rng.uniform(-0.02, 0.02) * span / w
        c = rng.uniform(-0.02, 0.02) * span / h
        a = d_center - b * cx - c * cy
        sign = rng.choice([-1.0, 1.0])
        intensity = sign * rng.uniform(1.5, 6.0) * spec.contrast
        layers.append(_Layer((a, b, c), rng.choice(["ellipse", "rect"]), intensity,
                             (cx, cy, rx, ry, theta)))
    return layers


def _composite(layers, sample_fn, h, w):
    """Per-pixel max-disparity compositing; returns (intensity, disparity, layer index)."""
    best_d = np.full((h, w), -np.inf)
    value = np.zeros((h, w))
    index = np.zeros((h, w), dtype=np.int64)
    for i, layer in enumerate(layers):
        cover, d, val = sample_fn(layer)
        take = cover & (d > best_d)
        best_d = np.where(take, d, best_d)
        value = np.where(take, val, value)
        index = np.where(take, i, index)
    return value, best_d, index


def render_scene(spec: SyntheticSceneSpec, height: int, width: int):
    """Noise-free views, dense left disparity and the left occlusion mask."""
    rng = np.random.default_rng(spec.seed)
    h, w = height, width
    lo, hi = spec.disparity_range
    margin = int(math.ceil(hi)) + 4
    wc = w + margin

    base = rng.uniform(22.0, 30.0)
    field_ = (base + 2.0 * spec.contrast * _smooth_noise(rng, (h, wc), 0.25 * min(h, w))
              + spec.texture_amplitude * spec.contrast * _smooth_noise(rng, (h, wc), 1.5))
    layers = _build_layers(spec, rng, h, w)

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    def left_sample(layer):
        val = field_[:, :w] if layer.kind == "background" else np.full((h, w), layer.intensity + base)
        return layer.covers(xs, ys), layer.disparity(xs, ys), val

    def right_sample(layer):
        xl = layer.source_x(xs, ys)
        cover = layer.covers(xl, ys) & (xl >= 0) & (xl <= wc - 1)
        if layer.kind == "background":
            val = map_coordinates(field_, [ys, np.clip(xl, 0, wc - 1)], order=1, mode="nearest")
        else:
            val = np.full((h, w), layer.intensity + base)
        return cover, layer.disparity(xl, ys), val

    left, disp, _ = _composite(layers, left_sample, h, w)
    right, right_disp, _ = _composite(layers, right_sample, h, w)
    disp = np.clip(disp, lo, hi)

    # a left pixel is visible in the right view if its match lands in frame on
    # the same surface
    xr = xs - disp
    rd = map_coordinates(right_disp, [ys, np.clip(xr, 0, w - 1)], order=1, mode="nearest")
    occluded = (xr < 0) | (np.abs(rd - disp) > 0.5)
    return left, right, disp, occluded


def degrade(image: np.ndarray, blur: float, sigma: float, rng) -> np.ndarray:
    out = gaussian_filter(image, blur, mode="reflect") if blur > 0 else image
    if sigma > 0:
        out = out + rng.normal(0.0, sigma, image.shape)
    return out


def generate_synthetic(spec: SyntheticSceneSpec, dims: tuple[int, int], sample_id: str | None = None) -> StereoSample:
    """Deterministic in ``spec.seed``; returns raw (temperature-unit) views and dense gt.

    ``spec.sparsity`` is not applied here; dataset writers call ``sparsify``.
    """
    h, w = dims
    left, right, disp, occluded = render_scene(spec, h, w)
    rng = np.random.default_rng([spec.seed, 1])
    left = degrade(left, spec.blur_radius, spec.noise_sigma, rng).astype(np.float32)
    right = degrade(right, spec.blur_radius, spec.noise_sigma, rng).astype(np.float32)
    gt = DisparityMap(disp.astype(np.float32), np.ones((h, w), bool))
    return StereoSample(left, right, gt, spec.condition_tag,
                        sample_id or f"synth_{spec.seed:06d}", occlusion=occluded)


def sparsify(gt: DisparityMap, fraction: float, seed: int = 0) -> DisparityMap:
    """Keep ``fraction`` of the pixels along jittered horizontal scan lines.

    ``ceil(fraction * H)`` lines are spread evenly over the rows with a random
    phase; each line wanders by at most one row per column and keeps each of
    its pixels with probability ``fraction * H / n_lines``. Source-invalid
    pixels stay invalid; kept values are copied unchanged.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return DisparityMap(gt.data.copy(), gt.valid.copy(), gt.scale)
    h, w = gt.shape
    rng = np.random.default_rng([seed, 2])
    n_lines = max(1, math.ceil(fraction * h))
    keep_p = fraction * h / n_lines
    spacing = h / n_lines
    rows = (rng.uniform(0, spacing) + spacing * np.arange(n_lines)).astype(int)
    jitter_ok = spacing >= 3
    keep = np.zeros((h, w), bool)
    cols = np.arange(w)
    for r in rows:
        offs = np.zeros(w, int)
        if jitter_ok:
            # slow random walk in {-1, 0, 1}
            steps = rng.choice([-1, 0, 1], size=w, p=[0.1, 0.8, 0.1])
            offs = np.clip(np.cumsum(steps), -1, 1)
        line_rows = np.clip(r + offs, 0, h - 1)
        kept = rng.uniform(size=w) < keep_p
        keep[line_rows[kept], cols[kept]] = True
    valid = gt.valid & keep
    return DisparityMap(np.where(valid, gt.data, 0).astype(np.float32), valid, gt.scale)
