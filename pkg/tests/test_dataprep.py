import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbeval.dataprep import (DatasetManifest, FoldSpec, ImagePair, ManifestError, augment_d4, build_folds,
                             make_manifest, quarter, read_manifest, reassemble, write_manifest)
from gbeval.imagecore import BinaryMask, ProbabilityMap


def test_quarter_sizes_and_order():
    img = np.arange(1024 * 1024, dtype=np.float64).reshape(1024, 1024)
    tiles = quarter(img)
    assert [t.shape for t in tiles] == [(512, 512)] * 4
    assert tiles[1][0, 0] == img[0, 512]
    assert tiles[2][0, 0] == img[512, 0]
    small = quarter(np.array([[1, 2], [3, 4]]))
    assert [t.tolist() for t in small] == [[[1]], [[2]], [[3]], [[4]]]


def test_quarter_odd_rejected():
    with pytest.raises(ValueError):
        quarter(np.zeros((3, 4)))


def test_quarter_keeps_type():
    tiles = quarter(BinaryMask(np.eye(4, dtype=bool)))
    assert all(isinstance(t, BinaryMask) for t in tiles)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_quarter_reassemble_identity(h, w, seed):
    img = np.random.default_rng(seed).random((2 * h, 2 * w))
    assert np.array_equal(reassemble(quarter(img)), img)


def _key(a):
    return a.tobytes()


def test_d4_constant_and_distinct():
    outs = augment_d4(np.full((3, 3), 7))
    assert all(np.array_equal(o, np.full((3, 3), 7)) for o in outs)
    outs = augment_d4(np.array([[1, 2], [3, 4]]))
    assert len({_key(o) for o in outs}) == 8


def test_d4_matches_hand_enumeration():
    # the 8 arrangements of [[1,2],[3,4]] under the square's symmetries
    expected = {
        (1, 2, 3, 4), (2, 4, 1, 3), (4, 3, 2, 1), (3, 1, 4, 2),
        (2, 1, 4, 3), (3, 4, 1, 2), (1, 3, 2, 4), (4, 2, 3, 1),
    }
    got = {tuple(o.ravel().tolist()) for o in augment_d4(np.array([[1, 2], [3, 4]]))}
    assert got == expected


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_d4_closure(seed):
    img = np.random.default_rng(seed).random((8, 8))
    base = {_key(o) for o in augment_d4(img)}
    for o in augment_d4(img):
        assert {_key(x) for x in augment_d4(o)} == base


def test_d4_pairs_transform_identically():
    rng = np.random.default_rng(0)
    img = rng.random((6, 6))
    mask = img > 0.5
    for a, m in zip(augment_d4(ProbabilityMap(img)), augment_d4(BinaryMask(mask))):
        assert np.array_equal(a.values > 0.5, m.values)


def test_d4_non_square():
    with pytest.raises(ValueError):
        augment_d4(np.zeros((2, 4)))


def test_fold_sizes():
    folds = build_folds(56, 5, 0)
    assert sorted(len(f.validation_ids) for f in folds) == [11, 11, 11, 11, 12]
    assert [len(f.validation_ids) for f in build_folds(10, 5, 3)] == [2] * 5
    with pytest.raises(ValueError):
        build_folds(4, 5, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.integers(0, 60), st.integers(0, 1000))
def test_fold_partition_properties(k, extra, seed):
    n = k + extra
    folds = build_folds(n, k, seed)
    seen = [i for f in folds for i in f.validation_ids]
    assert sorted(seen) == list(range(n))
    sizes = [len(f.validation_ids) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    for f in folds:
        assert f.training_ids == frozenset(range(n)) - f.validation_ids
    assert build_folds(n, k, seed) == folds


def test_paper_training_arithmetic():
    pairs = [ImagePair(f"p{i}", "a", "b", f"o{i // 4}", i % 4) for i in range(56)]
    m = make_manifest(pairs, 5, 0)
    for i, f in enumerate(m.folds):
        if len(f.validation_ids) == 11:
            assert m.training_count(i) == 360


def _files(tmp_path, n):
    pairs = []
    for i in range(n):
        (tmp_path / f"i{i}.png").write_bytes(b"x")
        (tmp_path / f"a{i}.png").write_bytes(b"x")
        pairs.append(ImagePair(f"p{i}", f"i{i}.png", f"a{i}.png", f"src{i}", None))
    return pairs


def test_manifest_round_trip(tmp_path):
    m = make_manifest(_files(tmp_path, 7), 3, 42, root=tmp_path)
    write_manifest(m, tmp_path / "m.json")
    back = read_manifest(tmp_path / "m.json")
    assert back == m


def test_manifest_dangling_file(tmp_path):
    m = make_manifest(_files(tmp_path, 6), 3, 1, root=tmp_path)
    write_manifest(m, tmp_path / "m.json")
    (tmp_path / "a2.png").unlink()
    with pytest.raises(ManifestError, match="a2.png"):
        read_manifest(tmp_path / "m.json")


def test_manifest_overlapping_folds(tmp_path):
    pairs = _files(tmp_path, 4)
    ids = frozenset(p.id for p in pairs)
    folds = [FoldSpec(0, frozenset({"p0", "p1"}), ids - {"p0", "p1"}),
             FoldSpec(1, frozenset({"p1", "p2", "p3"}), ids - {"p1", "p2", "p3"})]
    bad = DatasetManifest(pairs, folds, 2, 0, root=tmp_path)
    with pytest.raises(ManifestError, match="validation sets"):
        write_manifest(bad, tmp_path / "m.json")
