import math

import numpy as np
import pytest

from gbeval.chac import detect_grains
from gbeval.confmetrics import abundance, certainty, confusion, f1
from gbeval.synthlab import (SeedSamplingError, SynthSpec, degrade_annotation, grid_grains, sample_seeds, soften,
                             voronoi_from_seeds, voronoi_grains, write_fixture)


def brute_assign(shape, seeds):
    h, w = shape
    out = np.zeros(shape, int)
    for r in range(h):
        for c in range(w):
            best, bi = None, -1
            for i, (sr, sc) in enumerate(seeds):
                d = (r - sr) ** 2 + (c - sc) ** 2
                if best is None or d < best:
                    best, bi = d, i
            out[r, c] = bi
    return out


def brute_frontier_distance(shape, seeds):
    """Euclidean distance from each pixel centre to the edge of its Voronoi cell."""
    assign = brute_assign(shape, seeds)
    h, w = shape
    out = np.full(shape, math.inf)
    for r in range(h):
        for c in range(w):
            i = assign[r, c]
            si = seeds[i]
            for j, sj in enumerate(seeds):
                if j == i:
                    continue
                # project onto the bisector normal
                nr, nc = sj[0] - si[0], sj[1] - si[1]
                norm = math.hypot(nr, nc)
                mid = ((si[0] + sj[0]) / 2, (si[1] + sj[1]) / 2)
                d = ((mid[0] - r) * nr + (mid[1] - c) * nc) / norm
                out[r, c] = min(out[r, c], d)
    return assign, out


def test_assignment_matches_brute_force():
    spec = SynthSpec(24, 20, 5, boundary_thickness=2, rng_seed=4)
    with pytest.warns(UserWarning, match="minimum detectable area"):
        truth = voronoi_grains(spec)
    seeds = [tuple(s) for s in truth.seed_points]
    assign, dist = brute_frontier_distance((20, 24), seeds)
    assert np.array_equal(truth.assignment, assign)
    rr, cc = np.mgrid[0:20, 0:24]
    frame = np.minimum(np.minimum(rr, 19 - rr), np.minimum(cc, 23 - cc)) + 0.5 <= 1.0
    assert np.array_equal(truth.annotation.values, (dist <= 1.0) | frame)


def test_single_seed_only_frame():
    truth = voronoi_grains(SynthSpec(40, 40, 1, rng_seed=0))
    m = truth.annotation.values
    assert m[:3].all() and m[-3:].all() and m[:, :3].all() and m[:, -3:].all()
    assert not m[3:-3, 3:-3].any()
    assert truth.cell_count == 1
    assert detect_grains(truth.annotation).count == 1


def test_two_seeds_straight_band():
    truth = voronoi_from_seeds((64, 64), [(32, 16), (32, 48)], thickness=5)
    inner = truth.annotation.values[3:-3, 3:-3]
    cols = np.nonzero(inner.any(axis=0))[0] + 3
    assert cols.tolist() == [30, 31, 32, 33, 34]
    assert inner[:, cols - 3].all()
    assert detect_grains(truth.annotation).count == 2


def test_seed_spacing_and_determinism():
    spec = SynthSpec(128, 128, 20, boundary_thickness=5, rng_seed=9)
    s = sample_seeds(spec)
    d = np.sqrt(((s[:, None] - s[None]) ** 2).sum(-1))
    assert d[~np.eye(20, dtype=bool)].min() >= 10
    assert np.array_equal(s, sample_seeds(spec))
    with pytest.raises(SeedSamplingError):
        sample_seeds(SynthSpec(16, 16, 50, boundary_thickness=5), max_attempts=500)


def test_annotation_is_strict_binary(tmp_path):
    from gbeval.imagecore import load_mask
    truth = voronoi_grains(SynthSpec(64, 64, 4, rng_seed=1))
    paths = write_fixture(tmp_path, truth)
    assert load_mask(paths["annotation"]) == truth.annotation


def test_cells_recovered_30_seeds():
    truth = voronoi_grains(SynthSpec(512, 512, 30, rng_seed=3))
    assert detect_grains(truth.annotation).count >= 27


def test_grid_nine():
    assert grid_grains().cell_count == 9
    assert detect_grains(grid_grains().annotation).count == 9


def test_degrade_extremes():
    truth = voronoi_grains(SynthSpec(256, 256, 12, rng_seed=2))
    assert degrade_annotation(truth, 0.0, 5) == truth.annotation
    only_frame = degrade_annotation(truth, 1.0, 5)
    assert np.array_equal(only_frame.values, truth.frame)
    assert detect_grains(only_frame).count <= 1


def test_degrade_nested_and_monotone():
    truth = voronoi_grains(SynthSpec(512, 512, 30, rng_seed=7))
    counts = []
    prev = None
    for f in (0.0, 0.3, 0.6, 1.0):
        d = degrade_annotation(truth, f, 11)
        if prev is not None:
            assert not (d.values & ~prev.values).any()  # erasures only grow
        prev = d
        counts.append(detect_grains(d).count)
    assert counts[0] > counts[1] > counts[3]
    assert counts == sorted(counts, reverse=True)
    assert degrade_annotation(truth, 0.3, 11) == degrade_annotation(truth, 0.3, 11)


def test_degraded_f1_drops():
    truth = voronoi_grains(SynthSpec(256, 256, 12, rng_seed=2))
    d = degrade_annotation(truth, 0.5, 1)
    c = confusion(d, truth.annotation)
    assert c.fp == 0
    assert f1(c) < 1


@pytest.mark.parametrize("f", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_soften_closed_form(f):
    mask = grid_grains(3, 40, 5).annotation
    pm = soften(mask, f, 0.15, rng_seed=3)
    assert certainty(pm, 0.15) == f
    if f == 1.0:
        assert abundance(pm, 0.15) == mask.values.sum() / mask.values.size
    if f == 0.0:
        assert abundance(pm, 0.15) is None


def test_soften_exact_subset_size():
    mask = np.random.default_rng(0).random((100, 100)) < 0.2
    assert certainty(soften(mask, 0.5, 0.15, 9), 0.15) == 0.5
    a, b = soften(mask, 0.5, 0.15, 9), soften(mask, 0.5, 0.15, 9)
    assert a == b
