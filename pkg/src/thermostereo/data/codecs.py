"""Disparity and image file codecs.

* PNG16 disparity: ``d = raw / divisor`` with ``raw == 0`` marking invalid
  pixels (KITTI convention, divisor 256).
* PFM: little/big-endian float maps, bottom-to-top scanlines.
* Grayscale images: 8- or 16-bit PNG.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from PIL import Image


class CodecError(ValueError):
    pass


@dataclass
class DisparityMap:
    data: np.ndarray  # float32 (H, W)
    valid: np.ndarray  # bool (H, W)
    scale: str = "full"

    @property
    def shape(self):
        return self.data.shape

    @classmethod
    def dense(cls, data: np.ndarray) -> "DisparityMap":
        data = np.asarray(data, dtype=np.float32)
        return cls(data, np.isfinite(data))


def encode_disparity_png16(disp: DisparityMap | np.ndarray, path, scale_divisor: float = 256.0) -> None:
    if isinstance(disp, DisparityMap):
        data, valid = disp.data, disp.valid
    else:
        data = np.asarray(disp, dtype=np.float64)
        valid = np.isfinite(data)
    raw = np.rint(np.where(valid, np.clip(data, 0, None), 0) * scale_divisor)
    if raw.max(initial=0) > 65535:
        raise CodecError(f"disparity {raw.max() / scale_divisor:g} exceeds the PNG16 range")
    raw = raw.astype(np.uint16)
    # a valid disparity that rounds to 0 would read back as invalid
    raw[valid & (raw == 0)] = 1
    Image.fromarray(raw).save(path)


def decode_disparity_png16(path, scale_divisor: float = 256.0) -> DisparityMap:
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I"):
            raise CodecError(f"{path}: expected a 16-bit single-channel PNG, got mode {im.mode}")
        raw = np.array(im)
    if raw.ndim != 2:
        raise CodecError(f"{path}: expected a single-channel image")
    valid = raw > 0
    data = (raw.astype(np.float32) / scale_divisor).astype(np.float32)
    return DisparityMap(data, valid)


def write_pfm(path, data: np.ndarray, scale: float = 1.0) -> None:
    """Write a single-channel PFM (little-endian, negative scale)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise CodecError("only single-channel PFM is supported")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(f"{-abs(scale):g}\n".encode())
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise CodecError(f"{path}: not a PFM file (header {header!r})")
        dims = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", f.readline())
        if not dims:
            raise CodecError(f"{path}: malformed PFM dimensions")
        w, h = map(int, dims.groups())
        try:
            scale = float(f.readline().strip())
        except ValueError as e:
            raise CodecError(f"{path}: malformed PFM scale") from e
        if scale == 0:
            raise CodecError(f"{path}: PFM scale must be non-zero")
        endian = "<" if scale < 0 else ">"
        buf = f.read()
    count = w * h * channels
    if len(buf) < 4 * count:
        raise CodecError(f"{path}: truncated PFM data")
    data = np.frombuffer(buf, dtype=endian + "f4", count=count)
    shape = (h, w, 3) if channels == 3 else (h, w)
    # rows are stored bottom to top
    return np.flipud(data.reshape(shape)).astype(np.float32)


def decode_disparity_pfm(path) -> DisparityMap:
    data = read_pfm(path)
    if data.ndim == 3:
        data = data[..., 0]
    data = np.ascontiguousarray(data)
    return DisparityMap(data, np.isfinite(data))


def read_image(path) -> np.ndarray:
    """Load a grayscale 8/16-bit image (RGB is converted to luma) as float32."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I", "F", "L"):
            return np.array(im).astype(np.float32)
        if im.mode in ("RGB", "RGBA"):
            return (np.array(im.convert("RGB")) @ LUMA).astype(np.float32)
        raise CodecError(f"{path}: unsupported image mode {im.mode}")


def write_image(path, image: np.ndarray, bits: int = 16) -> None:
    """Write a [0, 1] float image as an 8- or 16-bit grayscale PNG."""
    top = 255 if bits == 8 else 65535
    raw = np.rint(np.clip(image, 0, 1) * top).astype(np.uint8 if bits == 8 else np.uint16)
    Image.fromarray(raw).save(path)


# ITU-R BT.601 luma weights
LUMA = np.array([0.299, 0.587, 0.114])
THERMAL_RANGE = 40.0


def sceneflow_to_thermal(rgb: np.ndarray) -> np.ndarray:
    """Luma grayscale of an 8-bit RGB image, rescaled linearly to [0, 40]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise ValueError("expected an (H, W, 3) RGB image")
    luma = rgb @ LUMA
    return (luma * THERMAL_RANGE / 255.0).astype(np.float32)


def normalize_minmax(image: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1]; a constant image maps to 0."""
    image = np.asarray(image, dtype=np.float32)
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    lo, hi = float(image.min()), float(image.max())
    if hi - lo < 1e-12:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)
