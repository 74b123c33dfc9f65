import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segprop.core import LabelMap, SequenceSpec, one_hot, argmax_labels
from segprop.errors import BadOrdering, EmptyInput, NotInitialized, TooFewKeyframes
from segprop.evalmetrics import mean_f1
from segprop.flowio import FlowBank, FlowField
from segprop.propagate import (VoteSource, final_labels, init_state, per_pixel_mass_error, propagate_pair,
                               run_to_convergence, segprop_iterate, vote_weights)
from segprop.synthgen import benchmark_script, render

from _scenes import scene_inputs, static_inputs, translating_square


def test_vote_weights_examples():
    assert np.allclose(vote_weights([50, 50, 50, 50], 0.3), 0.25, atol=1e-15)
    a, b = math.exp(-0.05), math.exp(-0.15)
    assert np.allclose(vote_weights([1, 3], 0.05), [a / (a + b), b / (a + b)], atol=1e-12)
    assert np.allclose(vote_weights([1, 3], 0.05), [0.52498, 0.47502], atol=1e-5)
    assert np.allclose(vote_weights([0, 7, 300], 0.0), 1 / 3)
    with pytest.raises(EmptyInput):
        vote_weights([], 0.05)


@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=12), st.floats(0, 5))
def test_prop_vote_weights_sum_to_one(d, lam):
    w = vote_weights(d, lam)
    assert abs(w.sum() - 1.0) < 1e-12 and (w >= 0).all()
    order = np.argsort(d, kind="stable")
    assert (np.diff(w[order]) <= 1e-15).all()  # farther never outweighs nearer


def _zero_chain(n, h, w):
    z = FlowField.zeros(h, w)
    return [z] * n, [z] * n


def test_pair_static_scene():
    lab = LabelMap(np.random.default_rng(0).integers(0, 4, (7, 9)).astype(np.uint8), 4)
    fw, bw = _zero_chain(6, 7, 9)
    out = propagate_pair(lab, lab, fw, bw, 2)
    assert argmax_labels(out) == lab


def test_pair_symmetric_conflict_goes_to_lower_class():
    a = np.zeros((4, 4), dtype=np.uint8)
    b = a.copy()
    b[1:3, 1:3] = 2
    fw, bw = _zero_chain(4, 4, 4)
    out = propagate_pair(LabelMap(a, 3), LabelMap(b, 3), fw, bw, 2)
    assert np.allclose(out.data[0, 1:3, 1:3], 0.5) and np.allclose(out.data[2, 1:3, 1:3], 0.5)
    assert (argmax_labels(out).data == 0).all()


@pytest.mark.parametrize("v", [(1, 0), (1, 1), (-2, 1)])
def test_pair_translating_square_quarter(v):
    r = render(translating_square(n=21, v=v))
    out = propagate_pair(r.labels[0], r.labels[20], r.gt_fw, r.gt_bw, 5)
    assert (argmax_labels(out).data == r.labels[5].data).mean() >= 0.99


def test_pair_errors():
    lab = LabelMap(np.zeros((3, 3), dtype=np.uint8), 2)
    fw, bw = _zero_chain(3, 3, 3)
    for k in (0, 3, 5):
        with pytest.raises(BadOrdering):
            propagate_pair(lab, lab, fw, bw, k)


def test_init_three_frames_average():
    a = LabelMap(np.array([[0, 1]], dtype=np.uint8), 2)
    b = LabelMap(np.array([[1, 1]], dtype=np.uint8), 2)
    spec = SequenceSpec(3, 2, 1, 2, (0, 2))
    st_ = init_state(spec, {0: a, 2: b}, FlowBank.zeros(3, 1, 2))
    expect = (one_hot(a, 1.0).data + one_hot(b, 1.0).data) / 2
    assert np.allclose(st_.volumes[1], expect, atol=1e-15)


def test_init_uniform_and_source():
    lab, bank = static_inputs(n=6)
    spec = SequenceSpec(6, 6, 6, 3, (0, 5))
    u = init_state(spec, {0: lab, 5: lab}, bank, mode="uniform")
    assert np.allclose(u.volumes[1:5], 1 / 3, atol=1e-15)
    r = np.random.default_rng(4)
    echo = {k: r.random((3, 6, 6)) + 0.01 for k in range(6)}
    echo = {k: v / v.sum(axis=0) for k, v in echo.items()}
    src = VoteSource("echo", 0.25, lambda s, k: echo[k])
    s = init_state(spec, {0: lab, 5: lab}, bank, mode="source", source=src)
    for k in range(1, 5):
        assert np.allclose(s.volumes[k], echo[k], atol=1e-15)


def test_init_errors():
    lab, bank = static_inputs(n=6)
    with pytest.raises(TooFewKeyframes):
        init_state(SequenceSpec(6, 6, 6, 3, (0,)), {0: lab}, bank)
    with pytest.raises(TooFewKeyframes):
        init_state(SequenceSpec(6, 6, 6, 3, (0, 5)), {0: lab}, bank)
    with pytest.raises(NotInitialized):
        segprop_iterate(None, SequenceSpec(6, 6, 6, 3, (0, 5)), bank)


def test_static_fixed_point_and_convergence():
    lab, bank = static_inputs(n=12, h=8, w=8)
    spec = SequenceSpec(12, 8, 8, 3, (0, 11))
    s0 = init_state(spec, {0: lab, 11: lab}, bank)
    s1 = segprop_iterate(s0, spec, bank)
    assert np.abs(s1.volumes - s0.volumes).max() <= 1e-9
    _, used, hist = run_to_convergence(s0, spec, bank)
    assert used == 1 and hist == [0.0]


def _noisy_case(seed=0, n=21, size=24, script="b_translation", level=2):
    sc = benchmark_script(script, level, seed=seed, num_frames=n, width=size, height=size)
    r, kf, bank = scene_inputs(sc, (0, n - 1), exact_flow=False)
    spec = SequenceSpec(n, size, size, sc.num_classes, (0, n - 1))
    return r, kf, bank, spec


def test_keyframes_bit_identical_and_mass_conserved():
    r, kf, bank, spec = _noisy_case()
    s = init_state(spec, kf, bank)
    key = {k: s.volumes[k].copy() for k in kf}
    for _ in range(4):
        s = segprop_iterate(s, spec, bank)
        for k in kf:
            assert np.array_equal(s.volumes[k], key[k])
        assert per_pixel_mass_error(s, spec.total_vote_mass) <= 1e-6


def test_thread_count_does_not_change_result():
    r, kf, bank, spec = _noisy_case(seed=3)
    s = init_state(spec, kf, bank)
    a = run_to_convergence(s, spec, bank, threads=1, max_iters=3, epsilon=0)[0]
    b = run_to_convergence(s, spec, bank, threads=4, max_iters=3, epsilon=0)[0]
    assert np.array_equal(a.volumes, b.volumes)


@pytest.mark.parametrize("mass", [0.5, 3.0, 100.0])
def test_argmax_invariant_to_total_mass(mass):
    r, kf, bank, spec = _noisy_case(seed=1)
    spec_m = SequenceSpec(spec.num_frames, spec.width, spec.height, spec.num_classes, spec.keyframes,
                          total_vote_mass=mass)
    base = run_to_convergence(init_state(spec, kf, bank), spec, bank, max_iters=3, epsilon=0)[0]
    scaled = run_to_convergence(init_state(spec_m, kf, bank), spec_m, bank, max_iters=3, epsilon=0)[0]
    assert np.allclose(scaled.volumes, base.volumes * mass, rtol=1e-12, atol=1e-12)
    assert np.array_equal(base.labels, scaled.labels)


def test_source_weight_zero_is_noop_and_source_shifts_votes():
    r, kf, bank, spec = _noisy_case(seed=2)
    s0 = init_state(spec, kf, bank)
    gt = {k: one_hot(r.labels[k], 1.0).data for k in range(spec.num_frames)}
    zero = VoteSource("gt", 0.0, lambda s, k: gt[k])
    base = segprop_iterate(s0, spec, bank)
    same = segprop_iterate(s0, spec, bank, [zero])
    assert np.allclose(base.volumes, same.volumes, atol=1e-15)
    boosted = segprop_iterate(s0, spec, bank, [VoteSource("gt", 1.0, lambda s, k: gt[k])])
    frames = s0.unlabeled()
    f_base = mean_f1([base.labels[k] for k in frames], [r.labels[k] for k in frames], spec.num_classes)
    f_boost = mean_f1([boosted.labels[k] for k in frames], [r.labels[k] for k in frames], spec.num_classes)
    assert f_boost >= f_base


def test_one_sided_frames_get_votes():
    lab, bank = static_inputs(n=10)
    spec = SequenceSpec(10, 6, 6, 3, (3, 6))
    s = init_state(spec, {3: lab, 6: lab}, bank)
    assert s.one_sided == frozenset({0, 1, 2, 7, 8, 9})
    s = run_to_convergence(s, spec, bank)[0]
    for k in range(10):
        assert final_labels(s)[k] == lab


def test_changed_fraction_history_nonincreasing_majority():
    good = 0
    seeds = range(20)
    for seed in seeds:
        r, kf, bank, spec = _noisy_case(seed=seed, n=16, size=20, script="c_projective", level=2)
        _, _, hist = run_to_convergence(init_state(spec, kf, bank), spec, bank, max_iters=5, epsilon=0)
        good += all(b <= a for a, b in zip(hist, hist[1:]))
    assert good > len(seeds) / 2
