"""Raster containers shared by the pipeline, plus PNG/JPEG I/O.

All rasters are frozen dataclasses wrapping a read-only numpy array.  They
implement ``__array__`` so any function in the package that expects an
ndarray also accepts the typed container.

Images use a planar layout: ``data[c, y, x]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

# Odd 24-bit multiplier; multiplication by it mod 2**24 is a bijection, so
# distinct labels always get distinct colours.
_PALETTE_MULT = 0x9E3779
_PALETTE_INV = pow(_PALETTE_MULT, -1, 1 << 24)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Image:
    """Multi-channel image with intensities in [0, 1], stored planar (C, H, W)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[0] not in (1, 3):
            raise ValueError(f"Image data must have shape (C, H, W) with C in (1, 3), got {data.shape}")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("Image intensities must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def from_buffer(cls, width: int, height: int, channels: int, buffer) -> "Image":
        buf = np.asarray(buffer, dtype=np.float32).ravel()
        if buf.size != width * height * channels:
            raise ValueError(
                f"buffer length {buf.size} != width*height*channels = {width * height * channels}"
            )
        return cls(buf.reshape(channels, height, width))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def hwc(self) -> np.ndarray:
        """Interleaved (H, W, C) view, as most imaging libraries expect."""
        return np.moveaxis(self.data, 0, -1)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True)
class ProbabilityMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"ProbabilityMap must be 2-D, got shape {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def from_buffer(cls, width: int, height: int, buffer) -> "ProbabilityMap":
        buf = np.asarray(buffer, dtype=np.float64).ravel()
        if buf.size != width * height:
            raise ValueError(f"buffer length {buf.size} != width*height = {width * height}")
        return cls(buf.reshape(height, width))

    @property
    def shape(self):
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise ValueError(f"BinaryMask must be 2-D, got shape {b.shape}")
        object.__setattr__(self, "bits", _frozen(b.astype(bool)))

    @classmethod
    def from_buffer(cls, width: int, height: int, buffer) -> "BinaryMask":
        buf = np.asarray(buffer).ravel()
        if buf.size != width * height:
            raise ValueError(f"buffer length {buf.size} != width*height = {width * height}")
        return cls(buf.reshape(height, width))

    @property
    def shape(self):
        return self.bits.shape

    def __array__(self, dtype=None, copy=None):
        return self.bits if dtype is None else self.bits.astype(dtype)


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel non-negative integer labels.

    For instance maps 0 is background and regions are numbered 1..R.
    """

    labels: np.ndarray
    n_regions: int = field(init=False)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError(f"LabelMap must be 2-D, got shape {lab.shape}")
        if lab.size and lab.min() < 0:
            raise ValueError("labels must be non-negative")
        lab = _frozen(lab.astype(np.int32))
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "n_regions", int(np.count_nonzero(np.unique(lab))))

    @classmethod
    def from_buffer(cls, width: int, height: int, buffer) -> "LabelMap":
        buf = np.asarray(buffer).ravel()
        if buf.size != width * height:
            raise ValueError(f"buffer length {buf.size} != width*height = {width * height}")
        return cls(buf.reshape(height, width))

    @property
    def shape(self):
        return self.labels.shape

    def __array__(self, dtype=None, copy=None):
        return self.labels if dtype is None else self.labels.astype(dtype)


def load_image(path) -> Image:
    """Read an 8-bit PNG/JPEG as a 3-channel Image scaled to [0, 1]."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise ValueError(f"unsupported format {im.format!r}")
            if im.mode not in ("L", "RGB", "RGBA", "P", "LA", "1"):
                raise ValueError(f"unsupported pixel mode {im.mode!r} (8-bit only)")
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {str(path)!r}: {exc}") from exc
    return Image(np.moveaxis(rgb / 255.0, -1, 0))


def save_image(image: Image, path) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    arr = np.moveaxis(arr, 0, -1)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    PILImage.fromarray(arr).save(path, format="PNG")


def save_probability_map(pmap: ProbabilityMap, path) -> None:
    arr = np.clip(np.rint(np.asarray(pmap) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path, format="PNG")


def save_mask(mask: BinaryMask, path) -> None:
    PILImage.fromarray(np.asarray(mask).astype(np.uint8) * 255).save(path, format="PNG")


def label_colors(labels: np.ndarray) -> np.ndarray:
    """Deterministic label -> RGB colour mapping; label 0 is black."""
    code = (np.asarray(labels).astype(np.int64) * _PALETTE_MULT) & 0xFFFFFF
    return np.stack([(code >> 16) & 0xFF, (code >> 8) & 0xFF, code & 0xFF], axis=-1).astype(np.uint8)


def save_label_map(labels: LabelMap, path) -> None:
    lab = np.asarray(labels)
    if lab.size and lab.max() >= 1 << 24:
        raise ValueError("label values must fit in 24 bits for PNG export")
    try:
        PILImage.fromarray(label_colors(lab)).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write label map to {str(path)!r}: {exc}") from exc


def load_label_map(path) -> LabelMap:
    """Inverse of :func:`save_label_map`."""
    with PILImage.open(path) as im:
        rgb = np.asarray(im.convert("RGB")).astype(np.int64)
    code = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
    return LabelMap((code * _PALETTE_INV) & 0xFFFFFF)
