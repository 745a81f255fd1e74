"""``gbeval`` command line entry point.

Exit codes: 0 success, 2 bad input files, 3 data errors, 4 bad configuration.
Every invocation writes ``run.json`` describing what ran, including failures.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_INPUT, EXIT_DATA, EXIT_CONFIG = 0, 2, 3, 4


class CliError(Exception):
    code = EXIT_DATA


class InputError(CliError):
    code = EXIT_INPUT


class DataError(CliError):
    code = EXIT_DATA


class ConfigError(CliError):
    code = EXIT_CONFIG


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _pngs(d) -> dict:
    d = Path(d)
    if not d.is_dir():
        raise InputError(f"not a directory: {d}")
    return {p.stem: p for p in sorted(d.glob("*.png"))}


def _pair_dirs(a, b, what=("prediction", "annotation")) -> list:
    left, right = _pngs(a), _pngs(b)
    if not left and not right:
        raise InputError(f"no PNG files in {a} or {b}")
    only_l = sorted(set(left) - set(right))
    only_r = sorted(set(right) - set(left))
    if only_l or only_r:
        msg = []
        if only_l:
            msg.append(f"{what[0]} without {what[1]}: {', '.join(only_l)}")
        if only_r:
            msg.append(f"{what[1]} without {what[0]}: {', '.join(only_r)}")
        raise InputError("unpaired files; " + "; ".join(msg))
    return [(stem, left[stem], right[stem]) for stem in sorted(left)]


def _pmap(threads, fn, items):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


class Run:
    """Collects provenance for ``run.json``."""

    def __init__(self, args, argv):
        self.args = args
        self.record = {
            "command": ["gbeval"] + list(argv),
            "subcommand": args.command,
            "seed": args.seed,
            "versions": {
                "gbeval": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
            },
            "inputs": {},
            "outputs": [],
            "exit_code": None,
            "error": None,
        }

    def add_input(self, path) -> None:
        path = Path(path)
        if path.is_file():
            self.record["inputs"][str(path)] = _sha256(path)

    def add_output(self, path) -> None:
        self.record["outputs"].append(str(path))

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "run.json", "w") as fh:
            json.dump(self.record, fh, indent=2, sort_keys=True)
            fh.write("\n")


# --- subcommands -----------------------------------------------------------------

def cmd_prep(args, run: Run) -> None:
    from .dataprep import ImagePair, make_manifest, quarter, write_manifest
    from .imagecore import ImageFormatError, load_gray_raw, load_mask, save_gray_raw, save_mask

    pairs_in = _pair_dirs(args.images, args.annotations, ("image", "annotation"))
    out = Path(args.out)
    root = out.parent
    img_dir = root / "quarters" / "images"
    ann_dir = root / "quarters" / "annotations"
    img_dir.mkdir(parents=True, exist_ok=True)
    ann_dir.mkdir(parents=True, exist_ok=True)

    def work(item):
        stem, ip, ap = item
        run.add_input(ip)
        run.add_input(ap)
        try:
            img = load_gray_raw(ip)
            ann = load_mask(ap, lenient=args.lenient)
        except (ImageFormatError, FileNotFoundError) as exc:
            raise InputError(str(exc)) from exc
        if img.shape != ann.shape:
            raise DataError(f"{stem}: image {img.shape} and annotation {ann.shape} differ in size")
        if not args.quarter:
            return [ImagePair(stem, str(ip.resolve()), str(ap.resolve()), stem, None)]
        try:
            tiles = zip(quarter(img), quarter(ann))
        except ValueError as exc:
            raise DataError(f"{stem}: {exc}") from exc
        result = []
        for q, (ti, ta) in enumerate(tiles):
            pid = f"{stem}_q{q}"
            save_gray_raw(ti, img_dir / f"{pid}.png")
            save_mask(ta, ann_dir / f"{pid}.png")
            result.append(ImagePair(pid, f"quarters/images/{pid}.png", f"quarters/annotations/{pid}.png", stem, q))
        return result

    pairs = [p for group in _pmap(args.threads, work, pairs_in) for p in group]
    try:
        manifest = make_manifest(pairs, args.k, args.seed, augmentation=not args.no_augment, root=root)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_manifest(manifest, out)
    run.add_output(out)
    run.record["summary"] = {
        "pairs": len(pairs),
        "fold_sizes": [len(f.validation_ids) for f in manifest.folds],
        "training_images": [manifest.training_count(i) for i in range(manifest.k)],
    }


def cmd_eval(args, run: Run) -> None:
    from .confmetrics import (ConfidenceConfig, evaluate, histogram, histogram_svg, pooled_evaluate,
                              write_histogram_csv, write_metrics_csv)
    from .imagecore import ImageFormatError, load_mask, load_probability_map

    try:
        cfg = ConfidenceConfig(args.t)
        if not 0 < args.threshold < 1:
            raise ValueError("threshold must be in (0, 1)")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    items = _pair_dirs(args.pred, args.gt)

    def load(item):
        stem, pp, gp = item
        run.add_input(pp)
        run.add_input(gp)
        try:
            pm, gt = load_probability_map(pp), load_mask(gp, lenient=args.lenient)
        except (ImageFormatError, FileNotFoundError) as exc:
            raise InputError(f"{stem}: {exc}") from exc
        if pm.shape != gt.shape:
            raise DataError(f"{stem}: prediction {pm.shape} and annotation {gt.shape} differ in size")
        return stem, pm, gt

    loaded = _pmap(args.threads, load, items)
    rows = _pmap(args.threads, lambda x: (x[0], evaluate(x[1], x[2], cfg, args.threshold)), loaded)
    rows.append(("pooled", pooled_evaluate([(pm, gt) for _, pm, gt in loaded], cfg, args.threshold)))
    if args.pooled_only:
        rows = rows[-1:]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out)
    run.add_output(out)
    if args.histograms:
        hd = Path(args.histograms)
        hd.mkdir(parents=True, exist_ok=True)
        for stem, pm, _ in loaded:
            h = histogram(pm, args.bins)
            write_histogram_csv(h, hd / f"{stem}_hist.csv")
            (hd / f"{stem}_hist.svg").write_text(histogram_svg(h, args.t))
            run.add_output(hd / f"{stem}_hist.csv")


def _load_chac_config(path):
    from .chac import ChacConfig

    if path is None:
        return ChacConfig()
    try:
        return ChacConfig.from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError as exc:
        raise InputError(f"config not found: {path}") from exc
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid CHAC config {path}: {exc}") from exc


def cmd_chac(args, run: Run) -> None:
    from .chac import detect_grains, grain_overlay, write_grains_csv, write_summary_json
    from .imagecore import ImageFormatError, load_probability_map, save_rgb

    cfg = _load_chac_config(args.config)
    if args.config:
        run.add_input(args.config)
    files = _pngs(args.pred)
    if not files:
        raise InputError(f"no PNG files in {args.pred}")

    def work(item):
        stem, path = item
        run.add_input(path)
        try:
            pm = load_probability_map(path)
        except (ImageFormatError, FileNotFoundError) as exc:
            raise InputError(f"{stem}: {exc}") from exc
        return detect_grains(pm, cfg, image_id=stem)

    sets = _pmap(args.threads, work, sorted(files.items()))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_grains_csv(sets, out)
    summary = Path(args.summary) if args.summary else out.with_name(out.stem + "_summary.json")
    write_summary_json(sets, summary)
    run.add_output(out)
    run.add_output(summary)
    run.record["summary"] = {"total_grains": sum(gs.count for gs in sets)}
    if args.overlay_dir:
        od = Path(args.overlay_dir)
        od.mkdir(parents=True, exist_ok=True)
        for gs in sets:
            save_rgb(grain_overlay(gs, args.seed), od / f"{gs.image_id}_grains.png")


def cmd_cm2(args, run: Run) -> None:
    from .cm2 import Cm2Palette, parse_rgb, render_cm2
    from .confmetrics import binarize
    from .imagecore import ImageFormatError, load_gray_raw, load_mask, load_probability_map, save_rgb

    try:
        palette = Cm2Palette(parse_rgb(args.tp), parse_rgb(args.fp), parse_rgb(args.fn), parse_rgb(args.tn))
        if not 0 < args.threshold < 1 or not 0 <= args.blend <= 1:
            raise ValueError("threshold must be in (0, 1) and blend in [0, 1]")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    items = _pair_dirs(args.pred, args.gt)
    backgrounds = _pngs(args.background) if args.background else {}
    od = Path(args.out_dir)
    od.mkdir(parents=True, exist_ok=True)

    def work(item):
        stem, pp, gp = item
        run.add_input(pp)
        run.add_input(gp)
        try:
            pm, gt = load_probability_map(pp), load_mask(gp, lenient=args.lenient)
            bg = None
            if stem in backgrounds:
                raw = load_gray_raw(backgrounds[stem])
                bg = raw / (255.0 if raw.dtype == np.uint8 else 65535.0)
        except (ImageFormatError, FileNotFoundError) as exc:
            raise InputError(f"{stem}: {exc}") from exc
        if pm.shape != gt.shape:
            raise DataError(f"{stem}: prediction {pm.shape} and annotation {gt.shape} differ in size")
        img = render_cm2(binarize(pm, args.threshold), gt, palette, bg, args.blend)
        path = od / f"{stem}_cm2.png"
        save_rgb(img, path)
        return path

    for p in _pmap(args.threads, work, items):
        run.add_output(p)


def cmd_synth(args, run: Run) -> None:
    from .synthlab import SeedSamplingError, SynthSpec, degrade_annotation, grid_grains, soften, voronoi_grains, write_fixture

    try:
        if args.grid:
            truth = grid_grains(args.grid, args.pitch, args.thickness)
            truth.rng_seed = args.seed
        else:
            truth = voronoi_grains(SynthSpec(args.width, args.height, args.n_seeds, args.thickness,
                                             args.seed, not args.no_frame))
        degraded = degrade_annotation(truth, args.drop, args.seed) if args.drop is not None else None
        softened = (soften(degraded if degraded is not None else truth.annotation,
                           args.confident_fraction, args.t, args.seed)
                    if args.confident_fraction is not None else None)
    except SeedSamplingError as exc:
        raise ConfigError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    paths = write_fixture(args.out_dir, truth, degraded, softened, stem=args.stem)
    for p in paths.values():
        run.add_output(p)


def cmd_aggregate(args, run: Run) -> None:
    from .xval import aggregate, emit_errorbar_svg, emit_table, improvement_report, read_records

    path = Path(args.records)
    if not path.is_file():
        raise InputError(f"no such records file: {path}")
    run.add_input(path)
    try:
        records = read_records(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if not records:
        raise DataError(f"{path}: no records")
    group_by = tuple(args.group_by.split(","))
    try:
        summaries = aggregate(records, group_by)
    except (AttributeError, ValueError) as exc:
        raise ConfigError(f"bad grouping {args.group_by!r}: {exc}") from exc
    od = Path(args.out_dir)
    od.mkdir(parents=True, exist_ok=True)
    emit_table(summaries, od / "summary.csv")
    run.add_output(od / "summary.csv")
    metrics = args.metric.split(",")
    x_order = None
    if args.x_axis == "finetune_level":
        from .toynet import FINETUNE_LEVELS
        present = {s.value("finetune_level") for s in summaries}
        x_order = [v for v in FINETUNE_LEVELS if v in present] + sorted(present - set(FINETUNE_LEVELS))
    for m in metrics:
        svg = od / f"{m}_by_{args.x_axis}.svg"
        try:
            emit_errorbar_svg(summaries, m, args.x_axis, svg, x_order=x_order)
        except (KeyError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        run.add_output(svg)
    if args.baseline:
        base = tuple(_coerce(f, v) for f, v in zip(group_by, args.baseline.split(",")))
        rep = improvement_report(summaries, metrics[0], base)
        (od / "improvement.json").write_text(json.dumps(rep, indent=2) + "\n")
        run.add_output(od / "improvement.json")
        run.record["improvement"] = rep


def _coerce(field, value):
    return float(value) if field == "lambda" else value


def cmd_toytrain(args, run: Run) -> None:
    from .toynet import (TrainConfig, apply_finetune_level, config_dict, init_toynet, make_toy_dataset,
                         save_checkpoint, train, write_trace_csv)

    try:
        cfg = TrainConfig(args.lr, args.batch_size, args.lam, args.steps, args.seed)
        net = apply_finetune_level(init_toynet(args.seed), args.finetune, args.seed + 1)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    data = make_toy_dataset(args.samples, args.size, args.seed)
    trained, trace, state = train(net, data, cfg)
    od = Path(args.out_dir)
    od.mkdir(parents=True, exist_ok=True)
    write_trace_csv(trace, od / "loss_trace.csv")
    save_checkpoint(od / "checkpoint.json", trained, state, cfg.steps)
    run.add_output(od / "loss_trace.csv")
    run.add_output(od / "checkpoint.json")
    run.record["config"] = config_dict(cfg)
    run.record["summary"] = {"initial_bce": trace[0].bce, "final_bce": trace[-1].bce,
                             "final_weight_sq_sum": trained.weight_sq_sum()}


COMMANDS = {
    "prep": cmd_prep, "eval": cmd_eval, "chac": cmd_chac, "cm2": cmd_cm2,
    "synth": cmd_synth, "aggregate": cmd_aggregate, "toytrain": cmd_toytrain,
}


def build_parser() -> argparse.ArgumentParser:
    env_seed = os.environ.get("GBEVAL_SEED")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=int(env_seed) if env_seed else 0,
                        help="seed for all randomness (default: $GBEVAL_SEED or 0)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--output-dir", help="where run.json is written (default: next to the outputs)")

    p = argparse.ArgumentParser(prog="gbeval", description="Grain-boundary segmentation evaluation toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prep", parents=[common], help="quarter images and build k-fold manifest")
    s.add_argument("--images", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--out", required=True)
    s.add_argument("--no-quarter", dest="quarter", action="store_false")
    s.add_argument("--no-augment", action="store_true", help="record that training folds are not D4-augmented")
    s.add_argument("--lenient", action="store_true", help="threshold annotation masks at 128")

    s = sub.add_parser("eval", parents=[common], help="precision/recall/F1 and certainty/abundance")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--t", type=float, default=0.15)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.add_argument("--pooled", dest="pooled_only", action="store_true", help="emit only the pooled row")
    s.add_argument("--lenient", action="store_true")
    s.add_argument("--histograms", help="directory for per-image histogram CSV/SVG")
    s.add_argument("--bins", type=int, default=20)

    s = sub.add_parser("chac", parents=[common], help="detect grains with CHAC")
    s.add_argument("--pred", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--summary")
    s.add_argument("--overlay-dir")

    s = sub.add_parser("cm2", parents=[common], help="render confusion colour maps")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--tp", default="0,255,0")
    s.add_argument("--fp", default="0,0,255")
    s.add_argument("--fn", default="255,0,0")
    s.add_argument("--tn", default="255,255,255")
    s.add_argument("--background", help="directory of grayscale images to blend under the colours")
    s.add_argument("--blend", type=float, default=0.0)
    s.add_argument("--lenient", action="store_true")

    s = sub.add_parser("synth", parents=[common], help="generate synthetic grain fixtures")
    s.add_argument("--n-seeds", type=int, default=30)
    s.add_argument("--width", type=int, default=512)
    s.add_argument("--height", type=int, default=512)
    s.add_argument("--thickness", type=int, default=5)
    s.add_argument("--no-frame", action="store_true")
    s.add_argument("--grid", type=int, help="build an NxN square grid instead of a Voronoi map")
    s.add_argument("--pitch", type=int, default=40)
    s.add_argument("--drop", type=float, help="fraction of boundaries to erase in a degraded copy")
    s.add_argument("--confident-fraction", type=float, help="also write a softened probability map")
    s.add_argument("--t", type=float, default=0.15)
    s.add_argument("--stem", default="synth")
    s.add_argument("--out-dir", required=True)

    s = sub.add_parser("aggregate", parents=[common], help="group run records and plot mean +/- 1 std")
    s.add_argument("--records", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--group-by", default="architecture,lambda,finetune_level")
    s.add_argument("--metric", default="f1", help="comma-separated metrics to plot")
    s.add_argument("--x-axis", default="lambda")
    s.add_argument("--baseline", help="group key values (comma-separated) for a relative-improvement report")

    s = sub.add_parser("toytrain", parents=[common], help="train the miniature network")
    s.add_argument("--lambda", dest="lam", type=float, default=0.0)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--batch-size", type=int, default=4)
    s.add_argument("--finetune", default="all", help="frozen | enc2 | all | random")
    s.add_argument("--samples", type=int, default=8)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--out-dir", required=True)
    return p


def _run_dir(args) -> Path:
    if args.output_dir:
        return Path(args.output_dir)
    if getattr(args, "out_dir", None):
        return Path(args.out_dir)
    if getattr(args, "out", None):
        return Path(args.out).parent
    return Path(".")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.threads = max(1, args.threads)
    run = Run(args, argv)
    code = EXIT_OK
    try:
        COMMANDS[args.command](args, run)
    except CliError as exc:
        code = exc.code
        run.record["error"] = str(exc)
        print(f"gbeval {args.command}: {exc}", file=sys.stderr)
    run.record["exit_code"] = code
    run.record["inputs"] = dict(sorted(run.record["inputs"].items()))
    run.write(_run_dir(args))
    return code


if __name__ == "__main__":
    sys.exit(main())
