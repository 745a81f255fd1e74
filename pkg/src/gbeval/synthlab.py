"""Synthetic ground truth: Voronoi grain maps, annotation errors, soft predictions."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .imagecore import BinaryMask, ProbabilityMap, as_mask, save_mask, save_probability_map

MIN_DETECTABLE_AREA = 50


class SeedSamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    width: int
    height: int
    n_seeds: int
    boundary_thickness: int = 5
    rng_seed: int = 0
    draw_frame: bool = True

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if self.boundary_thickness < 1:
            raise ValueError("boundary_thickness must be >= 1")


@dataclass
class SynthTruth:
    annotation: BinaryMask
    cell_count: int
    cell_areas: list
    seed_points: list
    assignment: np.ndarray = field(repr=False)   # nearest-seed index per pixel
    frontier: np.ndarray = field(repr=False)     # index of the neighbouring cell across the closest frontier, -1 if none
    frame: np.ndarray = field(repr=False)
    boundary_thickness: int = 5
    rng_seed: Optional[int] = None

    def edges(self):
        """Sorted unordered cell pairs that own at least one non-frame boundary pixel."""
        sel = self.annotation.values & (self.frontier >= 0)
        a, b = self.assignment[sel], self.frontier[sel]
        pairs = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1)
        return [tuple(int(x) for x in p) for p in np.unique(pairs, axis=0)] if pairs.size else []


def sample_seeds(spec: SynthSpec, max_attempts: int = 10000) -> np.ndarray:
    """Uniform integer seed points with pairwise distance >= 2 * thickness."""
    rng = np.random.default_rng(spec.rng_seed)
    min_d2 = (2 * spec.boundary_thickness) ** 2
    seeds = []
    attempts = 0
    while len(seeds) < spec.n_seeds:
        attempts += 1
        if attempts > max_attempts:
            raise SeedSamplingError(
                f"placed only {len(seeds)} of {spec.n_seeds} seeds after {max_attempts} attempts")
        cand = (int(rng.integers(spec.height)), int(rng.integers(spec.width)))
        if all((cand[0] - s[0]) ** 2 + (cand[1] - s[1]) ** 2 >= min_d2 for s in seeds):
            seeds.append(cand)
    return np.array(seeds, dtype=np.int64)


def nearest_seed(shape, seeds: np.ndarray, row0: int = 0):
    """Per-pixel nearest seed index and squared distances to every seed."""
    h, w = shape
    rr, cc = np.mgrid[row0:row0 + h, 0:w]
    d2 = (rr[..., None] - seeds[:, 0]) ** 2 + (cc[..., None] - seeds[:, 1]) ** 2
    return np.argmin(d2, axis=2), d2  # argmin breaks ties toward the lower index


def _frontiers(shape, seeds, half, row0=0):
    assign, d2 = nearest_seed(shape, seeds, row0)
    if len(seeds) == 1:
        return assign, np.full(shape, -1), np.zeros(shape, dtype=bool)
    d_own = np.take_along_axis(d2, assign[..., None], axis=2)[..., 0]
    # distance from a pixel in cell i to the bisector with seed j: (d_j^2 - d_i^2) / (2 |s_i - s_j|)
    sep = np.sqrt(((seeds[:, None, :] - seeds[None, :, :]) ** 2).sum(-1)).astype(np.float64)
    np.fill_diagonal(sep, 1.0)
    to_line = (d2 - d_own[..., None]) / (2.0 * sep[assign])
    np.put_along_axis(to_line, assign[..., None], np.inf, axis=2)
    frontier = np.argmin(to_line, axis=2)
    dist = np.take_along_axis(to_line, frontier[..., None], axis=2)[..., 0]
    boundary = dist <= half
    return assign, np.where(boundary, frontier, -1), boundary


def voronoi_from_seeds(shape, seeds, thickness: int = 5, draw_frame: bool = True,
                       rng_seed: Optional[int] = None) -> SynthTruth:
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1, 2)
    h, w = shape
    n = len(seeds)
    half = thickness / 2.0
    assign = np.empty(shape, dtype=np.int64)
    frontier = np.empty(shape, dtype=np.int64)
    boundary = np.empty(shape, dtype=bool)
    step = max(1, (1 << 21) // max(w * n, 1))  # bound the (rows, w, n) temporaries
    for r0 in range(0, h, step):
        r1 = min(h, r0 + step)
        assign[r0:r1], frontier[r0:r1], boundary[r0:r1] = _frontiers((r1 - r0, w), seeds, half, r0)
    rr, cc = np.mgrid[0:h, 0:w]
    edge_dist = np.minimum(np.minimum(rr, h - 1 - rr), np.minimum(cc, w - 1 - cc)) + 0.5
    frame = (edge_dist <= half) if draw_frame else np.zeros(shape, dtype=bool)
    areas = np.bincount(assign.ravel(), minlength=n)
    return SynthTruth(BinaryMask(boundary | frame), n, [int(a) for a in areas],
                      [tuple(int(x) for x in s) for s in seeds], assign, frontier, frame,
                      thickness, rng_seed)


def voronoi_grains(spec: SynthSpec) -> SynthTruth:
    expected_area = spec.width * spec.height / spec.n_seeds
    if expected_area < 4 * MIN_DETECTABLE_AREA:
        warnings.warn(f"mean cell area {expected_area:.0f} px is below 4x the minimum detectable area",
                      stacklevel=2)
    seeds = sample_seeds(spec)
    return voronoi_from_seeds((spec.height, spec.width), seeds, spec.boundary_thickness,
                              spec.draw_frame, spec.rng_seed)


def grid_grains(cells_per_side: int = 3, pitch: int = 40, thickness: int = 5) -> SynthTruth:
    """Square grid of ``cells_per_side``**2 cells, boundaries along every cell edge and the frame.

    Built as a Voronoi diagram of lattice seeds, so an even ``pitch`` centres
    each boundary band on a pixel row/column.
    """
    size = cells_per_side * pitch
    centres = [pitch * i + pitch // 2 for i in range(cells_per_side)]
    seeds = [(r, c) for r in centres for c in centres]
    return voronoi_from_seeds((size, size), seeds, thickness, True)


def degrade_annotation(truth: SynthTruth, drop_fraction: float, rng_seed: int = 0) -> BinaryMask:
    """Erase whole cell-to-cell boundaries with probability ``drop_fraction``.

    One uniform draw per edge (in sorted edge order), so for a fixed seed the
    erased set grows monotonically with ``drop_fraction``.  The frame is kept.
    """
    if not 0.0 <= drop_fraction <= 1.0:
        raise ValueError("drop_fraction must be in [0, 1]")
    ann = truth.annotation.values
    edges = truth.edges()
    u = np.random.default_rng(rng_seed).random(len(edges))
    dropped = [e for e, x in zip(edges, u) if x < drop_fraction]
    if not dropped:
        return BinaryMask(ann.copy())
    a = np.minimum(truth.assignment, truth.frontier)
    b = np.maximum(truth.assignment, truth.frontier)
    n = truth.cell_count
    pair_key = a * n + b
    drop_keys = np.array([x * n + y for x, y in dropped])
    erase = ann & (truth.frontier >= 0) & np.isin(pair_key, drop_keys)
    return BinaryMask((ann & ~erase) | truth.frame)


def soften(mask, confident_fraction: float, t: float = 0.15, rng_seed: int = 0) -> ProbabilityMap:
    """Probability map with an exactly known share of confident pixels.

    ``round(confident_fraction * N)`` pixels are confident (1 - t/2 on the
    boundary, t/2 elsewhere); the rest are uniform on the open interval (t, 1 - t),
    kept one 16-bit quantum away from its ends so a 16-bit PNG round trip
    cannot move a pixel into a confident tail.
    """
    if not 0.0 <= confident_fraction <= 1.0:
        raise ValueError("confident_fraction must be in [0, 1]")
    if not 0.0 < t < 0.5:
        raise ValueError("t must satisfy 0 < t < 0.5")
    m = as_mask(mask).values
    n = m.size
    k = int(np.floor(confident_fraction * n + 0.5))
    rng = np.random.default_rng(rng_seed)
    chosen = np.zeros(n, dtype=bool)
    chosen[rng.permutation(n)[:k]] = True
    q = 1.0 / 65535
    vague = rng.uniform(t + q, 1.0 - t - q, size=n)
    flat = m.ravel()
    out = np.where(chosen, np.where(flat, 1.0 - t / 2, t / 2), vague)
    return ProbabilityMap(out.reshape(m.shape))


def sidecar(truth: SynthTruth) -> dict:
    return {
        "n_seeds": truth.cell_count,
        "seed_points": [list(p) for p in truth.seed_points],
        "cell_areas": truth.cell_areas,
        "rng_seed": truth.rng_seed,
        "boundary_thickness": truth.boundary_thickness,
    }


def write_fixture(out_dir, truth: SynthTruth, degraded=None, softened=None, stem: str = "synth") -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"annotation": out / f"{stem}_annotation.png"}
    save_mask(truth.annotation, paths["annotation"])
    if degraded is not None:
        paths["degraded"] = out / f"{stem}_degraded.png"
        save_mask(degraded, paths["degraded"])
    if softened is not None:
        paths["softened"] = out / f"{stem}_softened.png"
        save_probability_map(softened, paths["softened"], depth=16)
    paths["sidecar"] = out / f"{stem}.json"
    paths["sidecar"].write_text(json.dumps(sidecar(truth), indent=2) + "\n")
    return paths
