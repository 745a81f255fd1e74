"""Confusion Matrix Color Mapping: colour each pixel by its confusion outcome."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .confmetrics import ConfusionCounts
from .imagecore import RgbImage, as_mask


@dataclass(frozen=True)
class Cm2Palette:
    tp_color: tuple = (0, 255, 0)
    fp_color: tuple = (0, 0, 255)
    fn_color: tuple = (255, 0, 0)
    tn_color: tuple = (255, 255, 255)

    def __post_init__(self):
        colors = [tuple(int(x) for x in c) for c in self.colors()]
        for c in colors:
            if len(c) != 3 or not all(0 <= x <= 255 for x in c):
                raise ValueError(f"invalid RGB triplet {c}")
        if len(set(colors)) != 4:
            raise ValueError("CM2 palette colours must be pairwise distinct")

    def colors(self):
        return (self.tp_color, self.fp_color, self.fn_color, self.tn_color)


def parse_rgb(text: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"expected R,G,B, got {text!r}")
    rgb = tuple(int(p) for p in parts)
    if not all(0 <= x <= 255 for x in rgb):
        raise ValueError(f"channel out of range in {text!r}")
    return rgb


def render_cm2(pred, gt, palette: Optional[Cm2Palette] = None,
               background: Optional[np.ndarray] = None, blend: float = 0.0) -> RgbImage:
    """Render the outcome map.

    With ``background`` (a grayscale image in [0, 1]) and ``blend`` > 0 the
    colours are mixed with the gray image for inspection; the default is flat
    colour.
    """
    palette = palette or Cm2Palette()
    p, g = as_mask(pred).values, as_mask(gt).values
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: prediction {p.shape} vs annotation {g.shape}")
    # outcome index: 0=TP 1=FP 2=FN 3=TN
    outcome = np.where(p, np.where(g, 0, 1), np.where(g, 2, 3))
    lut = np.array(palette.colors(), dtype=np.uint8)
    rgb = lut[outcome]
    if background is not None and blend > 0:
        gray = np.clip(np.asarray(background, dtype=np.float64), 0, 1)[..., None] * 255.0
        rgb = np.rint((1 - blend) * rgb + blend * gray).astype(np.uint8)
    return RgbImage(rgb)


def cm2_census(img: RgbImage, palette: Optional[Cm2Palette] = None) -> ConfusionCounts:
    palette = palette or Cm2Palette()
    v = img.values.astype(np.int64)
    packed = (v[..., 0] << 16) | (v[..., 1] << 8) | v[..., 2]
    keys = [(c[0] << 16) | (c[1] << 8) | c[2] for c in palette.colors()]
    counts = [int(np.count_nonzero(packed == key)) for key in keys]
    if sum(counts) != packed.size:
        bad = ~np.isin(packed, keys)
        r, c = np.argwhere(bad)[0]
        raise ValueError(f"non-palette colour {tuple(int(x) for x in v[r, c])} at ({r}, {c})")
    return ConfusionCounts(*counts)
