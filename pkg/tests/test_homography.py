import numpy as np
import pytest
from hypothesis import given, strategies as st

from segprop.core import LabelMap, SequenceSpec, argmax_labels, one_hot
from segprop.errors import DimensionMismatch, TooFewPoints
from segprop.flowio import FlowBank, FlowField
from segprop.homography import (HomographyConfig, HomographyVoter, as_vote_source, connected_components, dlt,
                                estimate_homography_lmeds, homography_votes, normalize_h,
                                symmetric_transfer_error)
from segprop.propagate import init_state, run_to_convergence
from segprop.synthgen import render

from _scenes import translating_square


def flood_fill(data):
    """Independent 4-connected component oracle: explicit stack flood fill."""
    h, w = data.shape
    seen = np.zeros((h, w), dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if seen[y, x]:
                continue
            c = data[y, x]
            stack, pix = [(y, x)], []
            seen[y, x] = True
            while stack:
                cy, cx = stack.pop()
                pix.append((cy, cx))
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if 0 <= ny < h and 0 <= nx < w and not seen[ny, nx] and data[ny, nx] == c:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            comps.append((int(c), frozenset(pix)))
    return comps


def _as_sets(comps):
    return [(c.cls, frozenset(zip(c.ys.tolist(), c.xs.tolist()))) for c in comps]


def test_components_uniform_and_checkerboard():
    assert len(connected_components(LabelMap(np.zeros((5, 7), dtype=np.uint8), 2))) == 1
    sq = 3
    board = ((np.arange(12)[:, None] // sq + np.arange(12)[None, :] // sq) % 2).astype(np.uint8)
    comps = connected_components(LabelMap(board, 2))
    assert len(comps) == 16 and all(c.size == 9 for c in comps)


@pytest.mark.parametrize("seed", range(5))
def test_components_match_flood_fill(seed):
    data = np.random.default_rng(seed).integers(0, 3, (32, 32)).astype(np.uint8)
    # scanline discovery order matches the oracle's visiting order
    assert _as_sets(connected_components(LabelMap(data, 3))) == flood_fill(data)


@given(st.integers(0, 2**31 - 1))
def test_prop_components_partition(seed):
    r = np.random.default_rng(seed)
    data = r.integers(0, r.integers(1, 5), (r.integers(1, 12), r.integers(1, 12))).astype(np.uint8)
    comps = connected_components(LabelMap(data, 5))
    cover = np.zeros(data.shape, dtype=int)
    for c in comps:
        cover[c.ys, c.xs] += 1
        assert (data[c.ys, c.xs] == c.cls).all()
    assert (cover == 1).all()


def _warp(h, pts):
    q = np.c_[pts, np.ones(len(pts))] @ h.T
    return q[:, :2] / q[:, 2:]


def test_translation_exact():
    src = np.random.default_rng(0).uniform(0, 50, (8, 2))
    dst = src + [5.0, 3.0]
    h = estimate_homography_lmeds(src, dst)
    assert np.allclose(h, [[1, 0, 5], [0, 1, 3], [0, 0, 1]], atol=1e-9)
    assert symmetric_transfer_error(h, src, dst).max() < 1e-12  # squared px, so < (1e-6)^2


def _projective(r):
    h = np.eye(3) + r.normal(scale=[[0.05, 0.05, 3], [0.05, 0.05, 3], [1e-4, 1e-4, 0]], size=(3, 3))
    return h / h[2, 2]


def test_outliers_40_percent():
    r = np.random.default_rng(11)
    h_true = _projective(r)
    src = r.uniform(0, 64, (20, 2))
    dst = _warp(h_true, src)
    bad = r.choice(20, 8, replace=False)
    dst[bad] += r.uniform(15, 40, (8, 2)) * r.choice([-1, 1], (8, 2))
    h = estimate_homography_lmeds(src, dst, seed=1)
    inl = np.setdiff1d(np.arange(20), bad)
    assert np.abs(_warp(h, src[inl]) - dst[inl]).max() < 1e-3


def test_zero_outliers_exact_recovery():
    r = np.random.default_rng(5)
    for _ in range(10):
        h_true = _projective(r)
        src = r.uniform(0, 64, (30, 2))
        dst = _warp(h_true, src)
        h = estimate_homography_lmeds(src, dst, seed=2)
        assert np.sqrt(symmetric_transfer_error(h, src, dst)).max() < 1e-6


def test_collinear_rejected_and_too_few():
    src = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 5.0]])
    assert estimate_homography_lmeds(src, src + 1.0) is None
    with pytest.raises(TooFewPoints):
        estimate_homography_lmeds(src[:3], src[:3])
    with pytest.raises(DimensionMismatch):
        estimate_homography_lmeds(src, src[:3])


def test_lmeds_deterministic_per_seed():
    r = np.random.default_rng(3)
    src = r.uniform(0, 64, (60, 2))
    dst = _warp(_projective(r), src) + r.normal(scale=0.3, size=(60, 2))
    a = estimate_homography_lmeds(src, dst, seed=7)
    assert np.array_equal(a, estimate_homography_lmeds(src, dst, seed=7))


def test_dlt_batched_matches_single_and_normalize():
    r = np.random.default_rng(8)
    src = r.uniform(0, 10, (3, 4, 2))
    dst = src + r.normal(size=(3, 4, 2))
    batch = dlt(src, dst)
    for i in range(3):
        one = dlt(src[i], dst[i])
        assert np.allclose(normalize_h(batch[i]), normalize_h(one), atol=1e-9)
        assert np.allclose(_warp(one, src[i]), dst[i], atol=1e-8)


def test_votes_zero_flow_identity():
    r = np.random.default_rng(0)
    data = np.zeros((16, 16), dtype=np.uint8)
    data[3:9, 4:12] = 1
    data[10:15, 2:7] = 2
    lab = LabelMap(data, 3)
    v = homography_votes(lab, FlowField.zeros(16, 16)).data
    hit = v.sum(axis=0) > 0
    assert hit.all()
    assert np.allclose(v, one_hot(lab, 1.0).data, atol=1e-9)


def test_votes_three_pixel_component_skipped():
    data = np.zeros((8, 8), dtype=np.uint8)
    data[2, 2:5] = 1
    v = homography_votes(LabelMap(data, 2), FlowField.zeros(8, 8)).data
    assert v[1].sum() == 0.0


def test_votes_only_source_classes():
    data = np.zeros((12, 12), dtype=np.uint8)
    data[2:8, 2:8] = 3
    lab = LabelMap(data, 5)
    v = homography_votes(lab, FlowField.constant(12, 12, 0.7, -0.4)).data
    assert v[[1, 2, 4]].sum() == 0.0 and v[3].sum() > 0


def test_votes_translating_square_aligns():
    r = render(translating_square(n=9, v=(1.5, 0.5)))
    bank = FlowBank(r.gt_fw, r.gt_bw)
    v = homography_votes(r.labels[0], bank.composed(0, 8)).data
    pred = v.argmax(axis=0)
    gt = r.labels[8].data
    ys, xs = np.nonzero(pred != gt)
    # every mismatch lies within one pixel of a ground-truth class boundary
    from scipy import ndimage
    edge = ndimage.binary_dilation(gt == 1) & ndimage.binary_dilation(gt == 0)
    assert edge[ys, xs].all()


def test_votes_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        homography_votes(LabelMap(np.zeros((4, 4), dtype=np.uint8), 2), FlowField.zeros(4, 5))


def test_zero_weight_source_is_flow_only():
    r = render(translating_square(n=11, v=(1.0, 0.5)))
    bank = FlowBank(r.fw, r.bw)
    kf = {0: r.labels[0], 10: r.labels[10]}
    h, w = r.labels[0].shape
    spec = SequenceSpec(11, w, h, 2, (0, 10))
    src = as_vote_source(kf, bank, 0.0, HomographyConfig(enabled=True))
    base = run_to_convergence(init_state(spec, kf, bank), spec, bank, max_iters=2, epsilon=0)[0]
    with_h = run_to_convergence(init_state(spec, kf, bank, sources=[src]), spec, bank, [src],
                                max_iters=2, epsilon=0)[0]
    assert np.array_equal(base.labels, with_h.labels)


def test_voter_caches_and_weights_by_distance():
    r = render(translating_square(n=11, v=(1.0, 0.0)))
    bank = FlowBank(r.gt_fw, r.gt_bw)
    voter = HomographyVoter({0: r.labels[0], 10: r.labels[10]}, bank, HomographyConfig(enabled=True))
    v = voter.votes(3)
    assert voter.votes(3) is v
    s = v.sum(axis=0)
    # both keyframes deposit everywhere under pure translation: e^{-0.15} + e^{-0.35}
    assert np.isclose(np.median(s), np.exp(-0.15) + np.exp(-0.35))
