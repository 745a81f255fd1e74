"""Raster containers and PNG I/O shared by the rest of the package.

All rasters are 2-D numpy arrays indexed ``[row, col]`` with the origin at the
top-left corner.  The containers below validate on construction and freeze
their backing array so they can be shared freely.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class ImageFormatError(ValueError):
    """Raised when an image file violates the expected format."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] == 0:
            raise ValueError(f"probability map must be a non-empty 2-D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("probability values must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def __eq__(self, other):
        return isinstance(other, ProbabilityMap) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {v.shape}")
        if v.dtype != bool:
            if not np.isin(v, (0, 1)).all():
                raise ValueError("mask values must be boolean or 0/1")
            v = v.astype(bool)
        object.__setattr__(self, "values", _frozen(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def __invert__(self) -> BinaryMask:
        return BinaryMask(~self.values)

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class RgbImage:
    values: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValueError(f"RGB image must have shape (H, W, 3), got {v.shape}")
        object.__setattr__(self, "values", _frozen(v.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        return isinstance(other, RgbImage) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class LabelMap:
    labels: np.ndarray
    count: int = -1

    def __post_init__(self):
        v = np.asarray(self.labels)
        if v.ndim != 2 or not np.issubdtype(v.dtype, np.integer):
            raise ValueError("label map must be a 2-D integer array")
        if v.size and v.min() < 0:
            raise ValueError("labels must be non-negative")
        used = np.unique(v[v > 0])
        k = int(used.size)
        if k and (used[0] != 1 or used[-1] != k):
            raise ValueError("labels must be dense 1..K")
        object.__setattr__(self, "labels", _frozen(v.astype(np.int32)))
        object.__setattr__(self, "count", k)

    @property
    def shape(self):
        return self.labels.shape


def as_probability_map(x) -> ProbabilityMap:
    return x if isinstance(x, ProbabilityMap) else ProbabilityMap(np.asarray(x, dtype=np.float64))


def as_mask(x) -> BinaryMask:
    return x if isinstance(x, BinaryMask) else BinaryMask(np.asarray(x))


def _read_gray(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I;16B", "I;16L"):
            arr = np.array(im)
        elif im.mode == "I":
            # Pillow sometimes decodes 16-bit PNG as 32-bit "I"
            arr = np.array(im)
            if arr.min() < 0 or arr.max() > 65535:
                raise ImageFormatError(f"{path}: unsupported integer range")
            arr = arr.astype(np.uint16)
        else:
            raise ImageFormatError(f"{path}: expected single-channel grayscale PNG, got mode {im.mode}")
    if arr.ndim != 2 or arr.size == 0:
        raise ImageFormatError(f"{path}: zero-sized or non-2-D image")
    return arr


def _bit_depth(path, arr: np.ndarray) -> int:
    if arr.dtype == np.uint8:
        return 8
    with Image.open(path) as im:
        return 8 if im.mode == "L" else 16


def load_probability_map(path) -> ProbabilityMap:
    """Decode a grayscale 8/16-bit PNG as ``s / s_max``."""
    arr = _read_gray(path)
    s_max = 255.0 if _bit_depth(path, arr) == 8 else 65535.0
    return ProbabilityMap(arr.astype(np.float64) / s_max)


def save_probability_map(pmap, path, depth: int = 16) -> None:
    pmap = as_probability_map(pmap)
    if depth == 8:
        data = np.rint(pmap.values * 255.0).astype(np.uint8)
        Image.fromarray(data, mode="L").save(path)
    elif depth == 16:
        data = np.rint(pmap.values * 65535.0).astype(np.uint16)
        Image.fromarray(data).save(path)
    else:
        raise ValueError("depth must be 8 or 16")


def load_mask(path, lenient: bool = False) -> BinaryMask:
    arr = _read_gray(path)
    if arr.dtype != np.uint8:
        raise ImageFormatError(f"{path}: masks must be 8-bit")
    if lenient:
        return BinaryMask(arr >= 128)
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ImageFormatError(
            f"{path}: non-binary pixel value {int(arr[r, c])} at ({r}, {c}); "
            "use lenient mode to threshold at 128")
    return BinaryMask(arr == 255)


def save_mask(mask, path) -> None:
    mask = as_mask(mask)
    Image.fromarray(np.where(mask.values, 255, 0).astype(np.uint8), mode="L").save(path)


def save_rgb(img: RgbImage, path) -> None:
    Image.fromarray(np.ascontiguousarray(img.values), mode="RGB").save(path)


def load_rgb(path) -> RgbImage:
    with Image.open(path) as im:
        return RgbImage(np.array(im.convert("RGB")))


def load_gray_raw(path) -> np.ndarray:
    """Read a grayscale PNG without rescaling (used for raw TEM tiles)."""
    return _read_gray(path)


def save_gray_raw(arr: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.uint8:
        Image.fromarray(arr, mode="L").save(path)
    elif arr.dtype == np.uint16:
        Image.fromarray(arr).save(path)
    else:
        raise ValueError(f"unsupported dtype {arr.dtype}")
