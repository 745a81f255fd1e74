"""Convex Hull Approximate Contour (CHAC) grain detection.

A grain is a closed region of non-boundary pixels whose traced outline is
nearly convex.  Regions are labelled, their outer contour is traced with
Moore-neighbour tracing, and the solidity (contour area over convex hull area)
decides whether the region counts.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .imagecore import BinaryMask, LabelMap, ProbabilityMap, RgbImage

# counterclockwise on screen (row axis points down), starting west
_DIRS = ((0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1))
_DIR_INDEX = {d: i for i, d in enumerate(_DIRS)}


@dataclass(frozen=True)
class ChacConfig:
    binarize_threshold: float = 0.5
    connectivity: int = 4
    min_area_px: int = 50
    solidity_threshold: float = 0.90
    include_border_grains: bool = False
    closing_iterations: int = 0

    def __post_init__(self):
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ValueError("binarize_threshold must be in (0, 1)")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if int(self.min_area_px) != self.min_area_px or self.min_area_px < 1:
            raise ValueError("min_area_px must be an integer >= 1")
        if not 0.0 < self.solidity_threshold <= 1.0:
            raise ValueError("solidity_threshold must be in (0, 1]")
        if int(self.closing_iterations) != self.closing_iterations or self.closing_iterations < 0:
            raise ValueError("closing_iterations must be a non-negative integer")

    @classmethod
    def from_dict(cls, d: dict) -> ChacConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown CHAC config keys: {sorted(unknown)}")
        types = {"binarize_threshold": (int, float), "connectivity": int, "min_area_px": int,
                 "solidity_threshold": (int, float), "include_border_grains": bool,
                 "closing_iterations": int}
        for k, v in d.items():
            if isinstance(v, bool) and k != "include_border_grains":
                raise ValueError(f"{k} must be numeric")
            if not isinstance(v, types[k]):
                raise ValueError(f"{k} has wrong type {type(v).__name__}")
        return cls(**d)


@dataclass
class Grain:
    label: int
    area_px: int
    contour: list
    hull: list
    hull_area: float
    contour_area: float
    solidity: float
    centroid: tuple
    touches_border: bool


@dataclass
class GrainSet:
    image_id: str
    grains: list
    config: ChacConfig
    rejected: list = field(default_factory=list)  # (label, reason)
    labels: Optional[LabelMap] = field(default=None, repr=False)

    @property
    def count(self) -> int:
        return len(self.grains)


def _structure(connectivity: int):
    return ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)


def connected_components(mask, connectivity: int = 4) -> LabelMap:
    """Label TRUE pixels; labels are numbered by raster order of each component's first pixel."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    m = mask.values if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
    raw, k = ndimage.label(m, structure=_structure(connectivity))
    if k:
        flat = raw.ravel()
        ids, first = np.unique(flat, return_index=True)
        keep = ids > 0
        order = ids[keep][np.argsort(first[keep], kind="stable")]
        remap = np.zeros(k + 1, dtype=np.int32)
        remap[order] = np.arange(1, k + 1, dtype=np.int32)
        raw = remap[raw]
    return LabelMap(raw.astype(np.int32))


def trace_contour(labels: LabelMap, label: int) -> list:
    """Moore-neighbour trace of a component's outer boundary.

    Counterclockwise on screen, starting from the topmost-leftmost pixel; stops
    when the first move is about to repeat (Jacob's criterion).
    """
    lab = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    if label < 1:
        raise ValueError(f"unknown label {label}")
    rows, cols = np.nonzero(lab == label)
    if rows.size == 0:
        raise ValueError(f"unknown label {label}")
    h, w = lab.shape
    start = (int(rows[0]), int(cols[0]))  # np.nonzero is raster ordered

    def inside(r, c):
        return 0 <= r < h and 0 <= c < w and lab[r, c] == label

    p = start
    back = 0  # west of the start pixel is never in the component
    contour = []
    first_move = None
    while True:
        nxt = None
        for k in range(1, 9):
            d = _DIRS[(back + k) % 8]
            q = (p[0] + d[0], p[1] + d[1])
            if inside(*q):
                nxt = q
                prev = _DIRS[(back + k - 1) % 8]
                bpt = (p[0] + prev[0], p[1] + prev[1])
                break
        if nxt is None:
            return [start]
        move = (p, nxt)
        if first_move is None:
            first_move = move
        elif move == first_move:
            return contour
        contour.append(p)
        back = _DIR_INDEX[(bpt[0] - nxt[0], bpt[1] - nxt[1])]
        p = nxt


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> list:
    """Andrew's monotone chain; counterclockwise, collinear points dropped."""
    pts = sorted(set((float(p[0]), float(p[1])) for p in points))
    if not pts:
        raise ValueError("convex hull of an empty point set")
    if len(pts) <= 2:
        return pts
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def polygon_area(vertices) -> float:
    if len(vertices) < 3:
        return 0.0
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)


def _boundary_mask(image, cfg: ChacConfig) -> np.ndarray:
    if isinstance(image, ProbabilityMap):
        return image.values >= cfg.binarize_threshold
    if isinstance(image, BinaryMask):
        return image.values
    arr = np.asarray(image)
    if arr.dtype == bool:
        return arr
    return ProbabilityMap(arr).values >= cfg.binarize_threshold


def close_boundary(boundary: np.ndarray, iterations: int) -> np.ndarray:
    """Binary closing with a 3x3 square; the image edge is padded by replication."""
    if iterations <= 0:
        return boundary
    pad = iterations
    padded = np.pad(boundary, pad, mode="edge")
    closed = ndimage.binary_closing(padded, structure=np.ones((3, 3), bool), iterations=iterations)
    return closed[pad:-pad, pad:-pad]


def detect_grains(image, cfg: Optional[ChacConfig] = None, image_id: str = "") -> GrainSet:
    cfg = cfg or ChacConfig()
    boundary = close_boundary(_boundary_mask(image, cfg), cfg.closing_iterations)
    labels = connected_components(~boundary, cfg.connectivity)
    lab = labels.labels
    h, w = lab.shape
    k = labels.count
    areas = np.bincount(lab.ravel(), minlength=k + 1)
    edge = np.zeros(k + 1, dtype=bool)
    for strip in (lab[0, :], lab[-1, :], lab[:, 0], lab[:, -1]):
        edge[strip] = True
    sums_r = np.bincount(lab.ravel(), weights=np.repeat(np.arange(h), w), minlength=k + 1)
    sums_c = np.bincount(lab.ravel(), weights=np.tile(np.arange(w), h), minlength=k + 1)

    grains, rejected = [], []
    for label in range(1, k + 1):
        if edge[label] and not cfg.include_border_grains:
            rejected.append((label, "border"))
            continue
        if areas[label] < cfg.min_area_px:
            rejected.append((label, "area"))
            continue
        contour = trace_contour(labels, label)
        hull = convex_hull(contour)
        hull_area = polygon_area(hull)
        contour_area = polygon_area(contour)
        if hull_area > 0:
            solidity = min(contour_area / hull_area, 1.0)
        else:
            solidity = 1.0  # degenerate (line or point) regions are trivially convex
        if solidity < cfg.solidity_threshold:
            rejected.append((label, "solidity"))
            continue
        n = int(areas[label])
        grains.append(Grain(label, n, contour, hull, hull_area, contour_area, solidity,
                            (sums_r[label] / n, sums_c[label] / n), bool(edge[label])))
    return GrainSet(image_id, grains, cfg, rejected, labels)


def grain_stats(gs: GrainSet, bins: int = 10) -> dict:
    areas = np.array([g.area_px for g in gs.grains], dtype=np.float64)
    if areas.size == 0:
        return {"count": 0, "mean_area": None, "area_histogram": {"edges": [], "counts": []}}
    counts, edges = np.histogram(areas, bins=bins)
    return {"count": int(areas.size), "mean_area": float(areas.mean()),
            "area_histogram": {"edges": edges.tolist(), "counts": counts.tolist()}}


GRAIN_HEADER = ["image_id", "label", "area_px", "solidity", "centroid_row", "centroid_col", "touches_border"]


def write_grains_csv(grain_sets, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(GRAIN_HEADER)
        for gs in grain_sets:
            for g in gs.grains:
                wr.writerow([gs.image_id, g.label, g.area_px, repr(g.solidity),
                             repr(float(g.centroid[0])), repr(float(g.centroid[1])),
                             str(g.touches_border).lower()])


def summary_dict(grain_sets) -> dict:
    per_image = {gs.image_id: gs.count for gs in grain_sets}
    total = sum(per_image.values())
    return {
        "total_grains": total,
        "image_count": len(per_image),
        "grains_per_image": total / len(per_image) if per_image else None,
        "per_image": per_image,
        "config": asdict(grain_sets[0].config) if grain_sets else None,
    }


def write_summary_json(grain_sets, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary_dict(grain_sets), fh, indent=2, sort_keys=True)
        fh.write("\n")


def grain_overlay(gs: GrainSet, seed: int = 0) -> RgbImage:
    """Accepted grains in random colours, rejected regions gray, boundary black."""
    lab = gs.labels.labels
    palette = np.zeros((gs.labels.count + 1, 3), dtype=np.uint8)
    palette[1:] = 160
    rng = np.random.default_rng(seed)
    for g in gs.grains:
        palette[g.label] = rng.integers(40, 256, size=3)
    return RgbImage(palette[lab])
