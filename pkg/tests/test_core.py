import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from segprop.core import (ClassEntry, ClassPalette, LabelMap, SequenceSpec, VoteVolume, argmax_labels,
                          one_hot, read_label_map, read_palette, read_pgm, read_ppm, tie_fraction,
                          write_label_map, write_palette, write_ppm)
from segprop.errors import DimensionMismatch, FormatError


def test_one_hot_single_pixel():
    v = one_hot(LabelMap(np.array([[2]], dtype=np.uint8), 3), 1.0)
    assert v.data[:, 0, 0].tolist() == [0.0, 0.0, 1.0]


def test_one_hot_two_pixels_mass4():
    v = one_hot(LabelMap(np.array([[0, 1]], dtype=np.uint8), 2), 4.0)
    assert v.data[0].tolist() == [[4.0, 0.0]]
    assert v.data[1].tolist() == [[0.0, 4.0]]


def test_one_hot_argmax_roundtrip(rng):
    lab = LabelMap(rng.integers(0, 5, (8, 8)).astype(np.uint8), 5)
    assert argmax_labels(one_hot(lab, 1.0)) == lab


def test_argmax_examples():
    v = np.array([0.2, 0.5, 0.3]).reshape(3, 1, 1)
    assert argmax_labels(v).data[0, 0] == 1
    v = np.array([0.5, 0.5, 0.0]).reshape(3, 1, 1)
    assert argmax_labels(v).data[0, 0] == 0


def test_argmax_matches_linear_scan(rng):
    vol = rng.random((4, 16, 16))
    vol[:, 3, 3] = 0.25  # a four-way tie
    got = argmax_labels(vol).data
    for y in range(16):
        for x in range(16):
            best, arg = -1.0, -1
            for c in range(4):
                if vol[c, y, x] > best:
                    best, arg = vol[c, y, x], c
            assert got[y, x] == arg


def test_tie_fraction_examples(rng):
    vol = rng.permutation(300).reshape(3, 10, 10).astype(float)
    assert tie_fraction(vol) == 0.0
    assert tie_fraction(np.ones((3, 4, 4))) == 1.0
    for y, x in [(0, 0), (4, 7), (9, 9)]:
        vol[:, y, x] = [5.0, 5.0, 1.0]
    # count ties with an independent scan
    n = sum(1 for y in range(10) for x in range(10)
            if sorted(vol[:, y, x])[-1] == sorted(vol[:, y, x])[-2])
    assert n == 3
    assert tie_fraction(vol) == pytest.approx(0.03, abs=1e-15)


@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12), elements=st.integers(0, 6)),
       st.floats(0.01, 1e3))
def test_prop_one_hot_inverse(data, mass):
    lab = LabelMap(data, 7)
    assert argmax_labels(one_hot(lab, mass)) == lab


@given(hnp.arrays(np.float64, (3, 5, 5), elements=st.floats(0, 10)), st.floats(1e-3, 1e3))
def test_prop_argmax_scale_invariant(vol, s):
    a = argmax_labels(vol).data
    b = argmax_labels(vol * s).data
    # scaling can only merge values that were already within rounding of each other
    ties = np.sort(vol, axis=0)
    clear = (ties[-1] - ties[-2]) > 1e-9 * np.maximum(1, ties[-1])
    assert (a[clear] == b[clear]).all()


def test_labelmap_validation():
    with pytest.raises(ValueError):
        LabelMap(np.array([[3]], dtype=np.uint8), 3)
    LabelMap(np.array([[255]], dtype=np.uint8), 3)  # ignore index allowed
    lab = LabelMap(np.zeros((2, 2), dtype=np.uint8), 1)
    with pytest.raises(ValueError):
        lab.data[0, 0] = 1


def test_votevolume_rejects_negative():
    with pytest.raises(ValueError):
        VoteVolume(-np.ones((2, 2, 2)))


def test_sequence_spec_validation():
    spec = SequenceSpec(30, 8, 8, 3, (0, 29))
    assert spec.neighbor_offsets == (-10, -5, 5, 10)
    assert SequenceSpec(30, 8, 8, 3, (0, 29), f=3, stride=2).neighbor_offsets == (-6, -4, -2, 2, 4, 6)
    for bad in [dict(keyframes=(5, 5)), dict(keyframes=(0, 30)), dict(lam=-1.0), dict(f=0), dict(stride=0)]:
        kw = dict(num_frames=30, width=8, height=8, num_classes=3, keyframes=(0, 29))
        kw.update(bad)
        with pytest.raises(ValueError):
            SequenceSpec(**kw)


def test_palette_rules(tmp_path):
    with pytest.raises(ValueError):
        ClassPalette((ClassEntry(0, "a", (1, 2, 3)), ClassEntry(2, "b", (4, 5, 6))))
    with pytest.raises(ValueError):
        ClassPalette((ClassEntry(0, "a", (1, 2, 3)), ClassEntry(1, "b", (1, 2, 3))))
    pal = ClassPalette.default(12)
    assert len({e.color for e in pal.entries}) == 12
    write_palette(tmp_path / "p.txt", pal)
    assert read_palette(tmp_path / "p.txt") == pal
    (tmp_path / "bad.txt").write_text("0 sky 1 2\n")
    with pytest.raises(FormatError):
        read_palette(tmp_path / "bad.txt")


def test_pgm_ppm_roundtrip(tmp_path, rng):
    lab = LabelMap(rng.integers(0, 12, (7, 9)).astype(np.uint8), 12)
    write_label_map(tmp_path / "l.pgm", lab)
    assert read_label_map(tmp_path / "l.pgm", 12) == lab
    img = rng.integers(0, 256, (5, 4, 3)).astype(np.uint8)
    write_ppm(tmp_path / "i.ppm", img)
    assert (read_ppm(tmp_path / "i.ppm") == img).all()
    (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "t.pgm")
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n\x01\x02")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[1, 2]]
