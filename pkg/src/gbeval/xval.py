"""Cross-validation run records, grouped mean/std summaries and chart output."""
from __future__ import annotations

import csv
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

from .confmetrics import MetricBundle, fmt_value

METRICS = ("precision", "recall", "f1", "certainty", "abundance", "grain_count")
DEFAULT_GROUP_BY = ("architecture", "lambda", "finetune_level")


@dataclass
class RunRecord:
    architecture: str
    lam: float
    finetune_level: str
    fold_index: int
    metrics: MetricBundle = field(default_factory=MetricBundle)
    grain_count: Optional[int] = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.fold_index < 0:
            raise ValueError("fold_index must be >= 0")

    def key_value(self, name: str):
        return self.lam if name == "lambda" else getattr(self, name)

    def metric(self, name: str):
        if name == "grain_count":
            return self.grain_count if self.grain_count is not None else self.metrics.grain_count
        return getattr(self.metrics, name)


@dataclass
class Stat:
    mean: Optional[float]
    std: Optional[float]
    n: int


@dataclass
class GroupSummary:
    fields: tuple
    key: tuple
    stats: dict
    n: int

    def value(self, name: str):
        return self.key[self.fields.index(name)]

    def label(self) -> str:
        return ";".join(f"{f}={_fmt_key(v)}" for f, v in zip(self.fields, self.key))


def _fmt_key(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def mean_std(values):
    """Mean and sample (n - 1) standard deviation using exactly rounded sums."""
    n = len(values)
    if n == 0:
        return None, None
    mean = math.fsum(values) / n
    if n == 1:
        return mean, None
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var)


def aggregate(records, group_by=DEFAULT_GROUP_BY, metrics=METRICS):
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    group_by = tuple(group_by)
    groups = {}
    for r in records:
        groups.setdefault(tuple(r.key_value(g) for g in group_by), []).append(r)
    out = []
    for key in sorted(groups):
        recs = groups[key]
        stats = {}
        for m in metrics:
            vals = [float(v) for v in (r.metric(m) for r in recs) if v is not None]
            mean, std = mean_std(vals)
            stats[m] = Stat(mean, std, len(vals))
        out.append(GroupSummary(group_by, key, stats, len(recs)))
    return out


def best_by(summaries, metric: str):
    """Key of the group with the largest mean; ties go to the smaller lambda, then the lexically smaller key."""
    cands = [s for s in summaries if s.stats[metric].mean is not None]
    if not cands:
        raise ValueError(f"metric {metric!r} is undefined in every group")
    top = max(s.stats[metric].mean for s in cands)
    tied = [s for s in cands if s.stats[metric].mean == top]

    def order(s):
        lam = s.value("lambda") if "lambda" in s.fields else 0.0
        return (lam, tuple(_fmt_key(v) for v in s.key))

    return min(tied, key=order).key


def relative_improvement(baseline: float, improved: float) -> float:
    if baseline == 0:
        raise ZeroDivisionError("baseline is zero")
    return (improved - baseline) / baseline


def improvement_report(summaries, metric: str, baseline_key: tuple, candidate_key: Optional[tuple] = None) -> dict:
    by_key = {s.key: s for s in summaries}
    candidate_key = candidate_key or best_by(summaries, metric)
    a = by_key[baseline_key].stats[metric].mean
    b = by_key[candidate_key].stats[metric].mean
    rel = relative_improvement(a, b)
    return {"metric": metric, "baseline": list(baseline_key), "candidate": list(candidate_key),
            "baseline_mean": a, "candidate_mean": b, "relative_improvement": rel,
            "percent": f"{rel * 100:+.1f}%"}


# --- I/O -----------------------------------------------------------------------

def _na(v):
    return None if v is None or v == "NA" else v


def record_from_dict(d: dict) -> RunRecord:
    m = d.get("metrics", {}) or {}
    bundle = MetricBundle(**{k: _na(m.get(k)) for k in ("precision", "recall", "f1", "certainty", "abundance")},
                          grain_count=_na(m.get("grain_count")))
    return RunRecord(str(d["architecture"]), float(d["lambda"]), str(d["finetune_level"]),
                     int(d["fold_index"]), bundle, _na(d.get("grain_count")))


def record_to_dict(r: RunRecord) -> dict:
    m = r.metrics
    return {"architecture": r.architecture, "lambda": r.lam, "finetune_level": r.finetune_level,
            "fold_index": r.fold_index,
            "metrics": {k: getattr(m, k) for k in ("precision", "recall", "f1", "certainty", "abundance")},
            "grain_count": r.grain_count}


def read_records(path):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(record_from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record: {exc}") from exc
    return out


def write_records(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(record_to_dict(r), sort_keys=True) + "\n")


def emit_table(summaries, path, metrics=METRICS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "metric", "mean", "std", "n"])
        for m in metrics:
            for s in summaries:
                st = s.stats[m]
                w.writerow([s.label(), m, fmt_value(st.mean), fmt_value(st.std), st.n])


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _x_positions(values, x_axis: str):
    """Map axis values to [0, 1]; lambda gets a log scale with 0 as its own leftmost tick."""
    uniq = list(OrderedDict.fromkeys(values))
    if x_axis == "lambda":
        uniq = sorted(uniq)
        pos_vals = [v for v in uniq if v > 0]
        if not pos_vals:
            return {0.0: 0.5}, {0.0: "0"}
        logs = [math.log10(v) for v in pos_vals]
        lo, hi = min(logs), max(logs)
        span = max(hi - lo, 1.0)
        has_zero = 0.0 in uniq
        gap = span / max(len(pos_vals), 1)
        start = lo - gap if has_zero else lo
        width = hi - start if hi > start else 1.0
        xs, labels = {}, {}
        if has_zero:
            xs[0.0], labels[0.0] = 0.0, "0"
        for v, lg in zip(pos_vals, logs):
            xs[v] = (lg - start) / width if len(uniq) > 1 else 0.5
            labels[v] = f"{v:g}"
        return xs, labels
    n = len(uniq)
    return ({v: (i / (n - 1) if n > 1 else 0.5) for i, v in enumerate(uniq)},
            {v: str(v) for v in uniq})


def emit_errorbar_svg(summaries, metric: str, x_axis: str, path, x_order=None,
                      width: int = 640, height: int = 400, title: Optional[str] = None) -> None:
    """Line chart of group means with +/-1 std whiskers, one polyline per series."""
    summaries = [s for s in summaries if s.stats[metric].mean is not None]
    if not summaries:
        raise ValueError(f"no defined values for {metric!r}")
    if x_axis not in summaries[0].fields:
        raise ValueError(f"x axis {x_axis!r} is not a grouping field")
    # series are distinguished only by fields that actually vary (architecture always)
    series_fields = [f for f in summaries[0].fields if f != x_axis and
                     (f == "architecture" or len({s.value(f) for s in summaries}) > 1)]
    series = OrderedDict()
    for s in summaries:
        name = ", ".join(f"{f}={_fmt_key(s.value(f))}" if f != "architecture" else str(s.value(f))
                         for f in series_fields) or metric
        series.setdefault(name, []).append(s)
    xvals = x_order if x_order is not None else sorted({s.value(x_axis) for s in summaries})
    xs, xlabels = _x_positions(xvals, x_axis)

    lows, highs = [], []
    for s in summaries:
        st = s.stats[metric]
        d = st.std or 0.0
        lows.append(st.mean - d)
        highs.append(st.mean + d)
    ymin, ymax = min(lows), max(highs)
    if ymax == ymin:
        ymin, ymax = ymin - 0.5, ymax + 0.5
    left, right, top, bottom = 60.0, width - 160.0, 30.0, height - 50.0

    def px(v):
        return left + xs[v] * (right - left)

    def py(y):
        return bottom - (y - ymin) / (ymax - ymin) * (bottom - top)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<g class="plot" data-ymin="{ymin!r}" data-ymax="{ymax!r}" data-top="{top}" data-bottom="{bottom}">',
           f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>']
    for v, x in xs.items():
        X = left + x * (right - left)
        out.append(f'<text x="{X:.2f}" y="{bottom + 16}" text-anchor="middle">{xlabels.get(v, v)}</text>')
    for k in range(5):
        yv = ymin + (ymax - ymin) * k / 4
        out.append(f'<text x="{left - 6}" y="{py(yv) + 4:.2f}" text-anchor="end">{yv:.3g}</text>')
    for i, (name, group) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        group = sorted(group, key=lambda s: xs[s.value(x_axis)])
        pts = " ".join(f"{px(s.value(x_axis)):.3f},{py(s.stats[metric].mean):.3f}" for s in group)
        out.append(f'<polyline class="series" data-series="{name}" points="{pts}" fill="none" '
                   f'stroke="{color}" stroke-width="1.5"/>')
        for s in group:
            st = s.stats[metric]
            if st.std is None:
                continue
            X = px(s.value(x_axis))
            out.append(f'<line class="whisker" data-series="{name}" data-x="{_fmt_key(s.value(x_axis))}" '
                       f'x1="{X:.3f}" y1="{py(st.mean - st.std):.3f}" x2="{X:.3f}" '
                       f'y2="{py(st.mean + st.std):.3f}" stroke="{color}"/>')
        ly = top + 16 * i
        out.append(f'<text x="{right + 12}" y="{ly + 4:.1f}" fill="{color}">{name}</text>')
    out.append("</g>")
    out.append(f'<text x="{(left + right) / 2}" y="{height - 12}" text-anchor="middle">{x_axis}</text>')
    out.append(f'<text x="{left}" y="18">{title or metric} (mean &#177; 1 std)</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
