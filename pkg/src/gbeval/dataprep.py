"""Dataset preparation: quartering, dihedral augmentation and k-fold splits."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .imagecore import BinaryMask, ProbabilityMap

MANIFEST_VERSION = 1
D4_NAMES = ("identity", "rot90", "rot180", "rot270", "flip_h", "flip_v", "transpose", "antitranspose")


class ManifestError(ValueError):
    pass


def _raw(image):
    if isinstance(image, (ProbabilityMap, BinaryMask)):
        return image.values
    return np.asarray(image)


def _rewrap(like, arr):
    if isinstance(like, ProbabilityMap):
        return ProbabilityMap(arr)
    if isinstance(like, BinaryMask):
        return BinaryMask(arr)
    return arr


def quarter(image):
    """Split into four tiles ordered TL, TR, BL, BR."""
    arr = _raw(image)
    h, w = arr.shape[:2]
    if h % 2 or w % 2:
        raise ValueError(f"cannot quarter a {h}x{w} image: both dimensions must be even")
    hh, hw = h // 2, w // 2
    tiles = [arr[:hh, :hw], arr[:hh, hw:], arr[hh:, :hw], arr[hh:, hw:]]
    return [_rewrap(image, t.copy()) for t in tiles]


def reassemble(tiles):
    arrs = [_raw(t) for t in tiles]
    top = np.concatenate(arrs[:2], axis=1)
    bottom = np.concatenate(arrs[2:], axis=1)
    return _rewrap(tiles[0], np.concatenate([top, bottom], axis=0))


def d4_transform(arr: np.ndarray, index: int) -> np.ndarray:
    """Apply element ``index`` of the dihedral group (see ``D4_NAMES``)."""
    if index < 4:
        return np.rot90(arr, index)
    if index == 4:
        return arr[:, ::-1]
    if index == 5:
        return arr[::-1, :]
    if index == 6:
        return np.rot90(arr[:, ::-1], 1)
    if index == 7:
        return np.rot90(arr[::-1, :], 1)
    raise IndexError(index)


def augment_d4(image):
    """Return the eight D4 images of a square raster.

    Apply the same call to an image and its annotation to keep them paired.
    """
    arr = _raw(image)
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(f"D4 augmentation needs a square image, got {arr.shape[0]}x{arr.shape[1]}")
    return [_rewrap(image, np.ascontiguousarray(d4_transform(arr, i))) for i in range(8)]


@dataclass(frozen=True)
class ImagePair:
    id: str
    image_path: str
    annotation_path: str
    origin_id: str
    quadrant: Optional[int] = None


@dataclass(frozen=True)
class FoldSpec:
    fold_index: int
    validation_ids: frozenset
    training_ids: frozenset


@dataclass
class DatasetManifest:
    pairs: list
    folds: list
    k: int
    rng_seed: int
    augmentation: bool = True
    root: Optional[Path] = field(default=None, compare=False)

    def pair_ids(self):
        return [p.id for p in self.pairs]

    def training_count(self, fold_index: int) -> int:
        """Number of training images for a fold after augmentation."""
        n = len(self.folds[fold_index].training_ids)
        return n * 8 if self.augmentation else n


def build_folds(pair_count: int, k: int, rng_seed: int, ids=None):
    """Seeded shuffle followed by a contiguous partition into ``k`` folds.

    The first ``pair_count % k`` folds receive one extra item.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if pair_count < k:
        raise ValueError(f"cannot split {pair_count} pairs into {k} folds")
    ids = list(range(pair_count)) if ids is None else list(ids)
    if len(ids) != pair_count:
        raise ValueError("ids length must equal pair_count")
    order = np.random.default_rng(rng_seed).permutation(pair_count)
    base, extra = divmod(pair_count, k)
    folds, start = [], 0
    everything = frozenset(ids)
    for i in range(k):
        size = base + (1 if i < extra else 0)
        val = frozenset(ids[j] for j in order[start:start + size])
        folds.append(FoldSpec(i, val, everything - val))
        start += size
    return folds


def validate_manifest(m: DatasetManifest, check_files: bool = True) -> None:
    problems = []
    if m.k < 2:
        problems.append(f"k must be >= 2, got {m.k}")
    ids = m.pair_ids()
    if len(set(ids)) != len(ids):
        problems.append("duplicate pair ids")
    if len(m.folds) != m.k:
        problems.append(f"expected {m.k} folds, found {len(m.folds)}")
    seen = {}
    for f in m.folds:
        for pid in f.validation_ids:
            if pid not in set(ids):
                problems.append(f"fold {f.fold_index}: unknown pair id {pid!r}")
            if pid in seen:
                problems.append(f"pair {pid!r} in validation sets of folds {seen[pid]} and {f.fold_index}")
            seen[pid] = f.fold_index
        if f.validation_ids & f.training_ids:
            problems.append(f"fold {f.fold_index}: training and validation overlap")
    missing = set(ids) - set(seen)
    if missing:
        problems.append(f"pairs never validated: {sorted(missing)}")
    sizes = [len(f.validation_ids) for f in m.folds]
    if sizes and max(sizes) - min(sizes) > 1:
        problems.append(f"fold sizes differ by more than 1: {sizes}")
    for p in m.pairs:
        if p.quadrant is not None and p.quadrant not in range(4):
            problems.append(f"pair {p.id!r}: quadrant must be 0..3")
    if check_files:
        root = m.root or Path(".")
        for p in m.pairs:
            for rel in (p.image_path, p.annotation_path):
                if not (root / rel).is_file():
                    problems.append(f"missing file: {root / rel}")
    if problems:
        raise ManifestError("; ".join(problems))


def manifest_to_dict(m: DatasetManifest) -> dict:
    return {
        "version": MANIFEST_VERSION,
        "rng_seed": m.rng_seed,
        "k": m.k,
        "augmentation": "d4" if m.augmentation else "none",
        "pairs": [
            {"id": p.id, "image": p.image_path, "annotation": p.annotation_path,
             "origin_id": p.origin_id, "quadrant": p.quadrant}
            for p in m.pairs
        ],
        "folds": [
            {"fold_index": f.fold_index, "validation_ids": sorted(f.validation_ids)}
            for f in m.folds
        ],
    }


def manifest_from_dict(d: dict, root=None) -> DatasetManifest:
    try:
        if d["version"] != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {d['version']}")
        pairs = [ImagePair(p["id"], p["image"], p["annotation"], p["origin_id"], p.get("quadrant"))
                 for p in d["pairs"]]
        everything = frozenset(p.id for p in pairs)
        folds = []
        for f in d["folds"]:
            val = frozenset(f["validation_ids"])
            folds.append(FoldSpec(int(f["fold_index"]), val, everything - val))
        return DatasetManifest(pairs, folds, int(d["k"]), int(d["rng_seed"]),
                               d.get("augmentation", "d4") == "d4", root=root)
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed manifest: {exc!r}") from exc


def write_manifest(m: DatasetManifest, path) -> None:
    validate_manifest(m, check_files=False)
    Path(path).write_text(json.dumps(manifest_to_dict(m), indent=2) + "\n")


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from exc
    m = manifest_from_dict(d, root=path.parent)
    validate_manifest(m, check_files=check_files)
    return m


def make_manifest(pairs, k: int, rng_seed: int, augmentation: bool = True, root=None) -> DatasetManifest:
    folds = build_folds(len(pairs), k, rng_seed, ids=[p.id for p in pairs])
    return DatasetManifest(list(pairs), folds, k, rng_seed, augmentation, root=root)
