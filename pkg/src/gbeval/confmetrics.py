"""Pixel classification metrics and ground-truth-free confidence metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .imagecore import BinaryMask, as_mask, as_probability_map

BCE_EPS = 1e-7
DEFAULT_T = 0.15
DEFAULT_BINS = 20
METRIC_HEADER = ["image_id", "precision", "recall", "f1", "certainty", "abundance"]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class ConfidenceConfig:
    t: float = DEFAULT_T

    def __post_init__(self):
        if not 0.0 < self.t < 0.5:
            raise ValueError(f"confidence threshold must satisfy 0 < t < 0.5, got {self.t}")


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def bin_count(self) -> int:
        return len(self.counts)


@dataclass
class MetricBundle:
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    certainty: Optional[float] = None
    abundance: Optional[float] = None
    grain_count: Optional[int] = None


def _cfg(cfg) -> ConfidenceConfig:
    if cfg is None:
        return ConfidenceConfig()
    return cfg if isinstance(cfg, ConfidenceConfig) else ConfidenceConfig(float(cfg))


def binarize(pmap, threshold: float = 0.5) -> BinaryMask:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return BinaryMask(as_probability_map(pmap).values >= threshold)


def confusion(pred, gt) -> ConfusionCounts:
    p, g = as_mask(pred).values, as_mask(gt).values
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: prediction {p.shape} vs annotation {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def precision(c: ConfusionCounts) -> Optional[float]:
    d = c.tp + c.fp
    return c.tp / d if d else None


def recall(c: ConfusionCounts) -> Optional[float]:
    d = c.tp + c.fn
    return c.tp / d if d else None


def f1(c: ConfusionCounts) -> Optional[float]:
    p, r = precision(c), recall(c)
    if p is None or r is None or p + r == 0:
        return None
    return 2 * p * r / (p + r)


def _tails(values: np.ndarray, t: float):
    lo = int(np.count_nonzero(values <= t))
    hi = int(np.count_nonzero(values >= 1.0 - t))
    return lo, hi


def certainty(pmap, cfg=None) -> float:
    """Fraction of pixels predicted with probability <= t or >= 1 - t."""
    v = as_probability_map(pmap).values
    lo, hi = _tails(v, _cfg(cfg).t)
    return (lo + hi) / v.size


def abundance(pmap, cfg=None) -> Optional[float]:
    """Share of confident pixels that are confident positives; None if none are confident."""
    v = as_probability_map(pmap).values
    lo, hi = _tails(v, _cfg(cfg).t)
    return hi / (lo + hi) if lo + hi else None


def histogram(pmap, bin_count: int = DEFAULT_BINS) -> Histogram:
    if bin_count < 2:
        raise ValueError("bin_count must be >= 2")
    v = as_probability_map(pmap).values.ravel()
    edges = np.arange(bin_count + 1) / bin_count
    # right-open bins, last one closed at 1
    idx = np.searchsorted(edges, v, side="right") - 1
    idx = np.clip(idx, 0, bin_count - 1)
    counts = np.bincount(idx, minlength=bin_count).astype(np.int64)
    return Histogram(edges, counts)


def _edge_index(h: Histogram, x: float) -> int:
    j = int(round(x * h.bin_count))
    if not math.isclose(h.edges[j], x, rel_tol=0, abs_tol=1e-12):
        raise ValueError(f"{x} does not coincide with a bin edge of a {h.bin_count}-bin histogram")
    return j


def confidence_from_histogram(h: Histogram, cfg=None):
    """(certainty, abundance) computed from histogram counts alone.

    Pixels lying exactly on ``t`` fall in the bin above it and are therefore
    not counted as confident here, unlike the per-pixel path.
    """
    t = _cfg(cfg).t
    j_lo = _edge_index(h, t)
    j_hi = _edge_index(h, 1.0 - t)
    lo = int(h.counts[:j_lo].sum())
    hi = int(h.counts[j_hi:].sum())
    total = int(h.counts.sum())
    cert = (lo + hi) / total
    abund = hi / (lo + hi) if lo + hi else None
    return cert, abund


def bce(pmap, gt) -> float:
    p = as_probability_map(pmap).values
    y = as_mask(gt).values
    if p.shape != y.shape:
        raise ValueError(f"dimension mismatch: prediction {p.shape} vs annotation {y.shape}")
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return float(-np.mean(np.where(y, np.log(pc), np.log1p(-pc))))


def evaluate(pmap, gt, cfg=None, threshold: float = 0.5) -> MetricBundle:
    pmap = as_probability_map(pmap)
    c = confusion(binarize(pmap, threshold), gt)
    return MetricBundle(precision(c), recall(c), f1(c), certainty(pmap, cfg), abundance(pmap, cfg))


def pooled_evaluate(pairs, cfg=None, threshold: float = 0.5) -> MetricBundle:
    """Metrics over the union of pixels of many (prediction, annotation) pairs."""
    t = _cfg(cfg).t
    c = ConfusionCounts()
    lo = hi = n = 0
    for pmap, gt in pairs:
        pmap = as_probability_map(pmap)
        c = c + confusion(binarize(pmap, threshold), gt)
        a, b = _tails(pmap.values, t)
        lo, hi, n = lo + a, hi + b, n + pmap.values.size
    return MetricBundle(precision(c), recall(c), f1(c), (lo + hi) / n if n else None,
                        hi / (lo + hi) if lo + hi else None)


def fmt_value(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics_csv(rows, path) -> None:
    """``rows`` is an iterable of (image_id, MetricBundle)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_HEADER)
        for image_id, m in rows:
            w.writerow([image_id] + [fmt_value(getattr(m, k)) for k in METRIC_HEADER[1:]])


def read_metrics_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {k: (None if row[k] == "NA" else float(row[k])) for k in METRIC_HEADER[1:]}
            out.append((row["image_id"], MetricBundle(**vals)))
    return out


def write_histogram_csv(h: Histogram, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, n in zip(h.edges[:-1], h.edges[1:], h.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(n)])


def histogram_svg(h: Histogram, t: Optional[float] = None, width: int = 400, height: int = 240) -> str:
    pad = 30
    pw, ph = width - 2 * pad, height - 2 * pad
    top = max(int(h.counts.max()), 1)
    bw = pw / h.bin_count
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    for i, n in enumerate(h.counts):
        bh = ph * n / top
        parts.append(f'<rect x="{pad + i * bw:.2f}" y="{pad + ph - bh:.2f}" width="{bw * 0.9:.2f}" '
                     f'height="{bh:.2f}" fill="#4a6fa5"/>')
    if t is not None:
        for x in (t, 1 - t):
            px = pad + x * pw
            parts.append(f'<line x1="{px:.2f}" y1="{pad}" x2="{px:.2f}" y2="{pad + ph}" '
                         'stroke="#c0392b" stroke-dasharray="4,3"/>')
    parts.append(f'<line x1="{pad}" y1="{pad + ph}" x2="{pad + pw}" y2="{pad + ph}" stroke="black"/>')
    parts.append(f'<text x="{pad}" y="{height - 8}" font-size="10">0</text>')
    parts.append(f'<text x="{pad + pw - 6}" y="{height - 8}" font-size="10">1</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
