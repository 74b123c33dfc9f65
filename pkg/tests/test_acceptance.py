"""Acceptance suite: one PASS/FAIL line per primary criterion.

Lines are collected in ``_protocols.ACCEPTANCE`` and printed in the pytest
terminal summary; ``python tests/test_acceptance.py`` prints them directly.
Tolerances are pinned in the constants below.
"""
import struct
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from segprop.cli import main as cli_main
from segprop.config import RunConfig
from segprop.core import one_hot
from segprop.errors import BadMagic, TruncatedFile
from segprop.evalmetrics import ConfusionMatrix, class_scores
from segprop.flowio import FlowBank, read_flow, write_flow
from segprop.homography import estimate_homography_lmeds
from segprop.pipeline import eval_frames, run_propagation, score
from segprop.propagate import per_pixel_mass_error
from segprop.synthgen import benchmark_script, render, standard_benchmark

import _protocols as P
from _scenes import translating_square

EQUIV_TOL, EQUIV_SECONDS = 1e-9, 10.0
AGREEMENT_MIN = 0.999
FILTER_CLEAN_MIN, FILTER_NOISY_MIN = -0.001, 0.005
HOMOGRAPHY_GAIN_MIN = 0.005
GAP_STEP_TOL = 0.005
RECT_MIN = 0.99
MASS_TOL = 1e-6
LMEDS_TRIALS, LMEDS_MIN_OK, LMEDS_ERR = 100, 99, 1e-3
METRIC_TOL = 1e-12


def report(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    P.ACCEPTANCE.append(line)
    print(line)
    return ok


def check_equivalence():
    t0 = time.perf_counter()
    res = P.equivalence.__wrapped__()
    dt = time.perf_counter() - t0
    worst = max(rep.max_deviation for _, rep in res)
    ok = worst <= EQUIV_TOL and dt < EQUIV_SECONDS and len(res) == 15
    return ok, f"{len(res)} instances, max deviation {worst:.2e} (<= {EQUIV_TOL:g}), {dt:.1f} s (< {EQUIV_SECONDS:g} s)"


def check_independence():
    res = P.independence()
    worst = min(r.agreement for r in res)
    untied = sum(r.untied for r in res)
    ok = worst >= AGREEMENT_MIN and untied == 0
    return ok, (f"min agreement {worst:.5f} (>= {AGREEMENT_MIN}), {sum(r.disagreements for r in res)} "
                f"disagreements, {untied} outside ties")


def check_iteration_gain():
    curves = P.iteration_curve()
    it1 = np.mean([c[:, 0].mean() for c in curves.values()])
    it4 = np.mean([c[:, 3].mean() for c in curves.values()])
    return it4 >= it1, f"mean mF1 iteration 1 {it1:.4f} -> iteration 4 {it4:.4f} ({P.SEEDS} seeds, b-e, levels 1-2)"


def check_filtering():
    b0, a0 = P.filter_protocol(0, False)
    bn, an = P.filter_protocol(1, True)
    ok = a0 - b0 >= FILTER_CLEAN_MIN and an - bn >= FILTER_NOISY_MIN
    return ok, (f"level 0 delta {a0 - b0:+.4f} (>= {FILTER_CLEAN_MIN}), 1% planted noise delta "
                f"{an - bn:+.4f} (>= {FILTER_NOISY_MIN})")


def check_homography():
    g = P.homography_gain()
    pooled = np.mean([g[(n, lv)] for n in ("b_translation", "c_projective") for lv in (1, 2)], axis=0)
    e = np.mean([g[("e_articulated", lv)] for lv in (1, 2)], axis=0)
    gain = pooled[1] - pooled[0]
    ok = gain >= HOMOGRAPHY_GAIN_MIN and e[1] < e[0]
    return ok, (f"b-c flow+H gain {gain:+.4f} (>= {HOMOGRAPHY_GAIN_MIN}); e H-only {e[1]:.4f} "
                f"vs flow-only {e[0]:.4f}")


def check_gap():
    c = P.gap_curve()
    rises = np.diff(c)
    ok = bool((rises <= GAP_STEP_TOL).all()) and c[-1] < c[0]
    return ok, "mF1 at gaps 25..150: " + " ".join(f"{v:.4f}" for v in c) + f" (max rise {rises.max():+.4f})"


def check_exact_recovery():
    static = []
    for spacing in (2, 5, 10, 20, 40):
        sc = benchmark_script("a_static", 0, 0, num_frames=41, width=32, height=32)
        r = render(sc)
        kf = sorted(set(range(0, 41, spacing)) | {40})
        res = run_propagation(RunConfig(), {k: r.labels[k] for k in kf}, FlowBank(r.gt_fw, r.gt_bw), 41, 3)
        static.append(score(res.labels, r.labels, eval_frames(41, kf), 3))
    # pre-declared fixture: 10 px box, 1 px/frame, keyframes 0 and 50, exact flow
    r = render(translating_square(n=51, v=(1, 0)))
    res = run_propagation(RunConfig(), {0: r.labels[0], 50: r.labels[50]}, FlowBank(r.gt_fw, r.gt_bw), 51, 2)
    rect = score(res.labels, r.labels, eval_frames(51, (0, 50)), 2)
    ok = all(s == 1.0 for s in static) and rect >= RECT_MIN
    return ok, f"static mF1 {min(static):.4f} at spacings 2-40 (== 1); rectangle gap 50 mF1 {rect:.4f} (>= {RECT_MIN})"


def check_conservation():
    worst, clamped = 0.0, True
    for sc in standard_benchmark(seed=0, num_frames=P.NF, width=P.SIZE, height=P.SIZE):
        r = render(sc)
        kf = (0, P.NF - 1)
        ref = {k: one_hot(r.labels[k]).data for k in kf}
        errs = []

        def hook(s):
            nonlocal clamped
            errs.append(per_pixel_mass_error(s, 1.0))
            clamped &= all(np.array_equal(s.volumes[k], ref[k]) for k in kf)

        for cfg in (P.FLOW_ONLY, P.FLOW_H):
            run_propagation(cfg, {k: r.labels[k] for k in kf}, FlowBank(r.fw, r.bw), P.NF, sc.num_classes,
                            passes=7, on_iteration=hook)
        worst = max(worst, max(errs))
    ok = worst < MASS_TOL and clamped
    return ok, f"max |class-sum - mass| {worst:.2e} (< {MASS_TOL:g}), keyframes bit-identical: {clamped}"


def check_format():
    r = np.random.default_rng(2024)
    good = 0
    for _ in range(1000):
        h, w = (int(v) for v in r.integers(0, 17, 2))
        bits = r.integers(0, 2 ** 32, (h, w, 2), dtype=np.uint64).astype(np.uint32)
        vals = bits.view(np.float32)
        vals[~np.isfinite(vals)] = 0.0
        raw = struct.pack("<fii", 202021.25, w, h) + vals.astype("<f4").tobytes()
        good += write_flow(read_flow(raw)) == raw
    rejected = 0
    for bad, err in ((struct.pack("<fii", 1.0, 1, 1) + bytes(8), BadMagic),
                     (struct.pack("<fii", 202021.25, 2, 2) + bytes(28), TruncatedFile),
                     (b"PIEH", TruncatedFile)):
        try:
            read_flow(bad)
        except err:
            rejected += 1
    return good == 1000 and rejected == 3, f"{good}/1000 round-trips bit-exact, {rejected}/3 malformed files rejected"


def _warp(h, pts):
    q = np.c_[pts, np.ones(len(pts))] @ h.T
    return q[:, :2] / q[:, 2:]


def check_lmeds():
    ok_trials = 0
    for trial in range(LMEDS_TRIALS):
        r = np.random.default_rng(trial)
        h_true = np.eye(3) + r.normal(scale=[[0.05, 0.05, 3], [0.05, 0.05, 3], [1e-4, 1e-4, 0]], size=(3, 3))
        src = r.uniform(0, 64, (50, 2))
        dst = _warp(h_true, src)
        bad = r.choice(50, 20, replace=False)
        dst[bad] += r.uniform(10, 40, (20, 2)) * r.choice([-1, 1], (20, 2))
        h = estimate_homography_lmeds(src, dst, seed=trial)
        inl = np.setdiff1d(np.arange(50), bad)
        if h is not None and np.abs(_warp(h, src[inl]) - dst[inl]).max() < LMEDS_ERR:
            ok_trials += 1
    return ok_trials >= LMEDS_MIN_OK, f"{ok_trials}/{LMEDS_TRIALS} trials with inlier error < {LMEDS_ERR:g} px"


def check_determinism(tmp):
    tmp = Path(tmp)
    data = tmp / "data"
    cli_main(["synth", str(data), "--benchmark", "b_translation", "--noise-level", "1", "--num-frames", "41",
              "--keyframe-every", "20"])
    outs = []
    for i, threads in enumerate((1, 8, 1, 8)):
        out = tmp / f"run{i}"
        cli_main(["propagate", "--labels", str(data / "labels"), "--flows", str(data), "--out", str(out),
                  "--threads", str(threads), "--set", "homography.enabled=true", "--set", "filter.enabled=true"])
        outs.append(sorted((p.name, p.read_bytes()) for p in (out / "labels").iterdir())
                    + [("history", (out / "history.txt").read_bytes())])
    same = all(o == outs[0] for o in outs[1:]) and len(outs[0]) == 42
    return same, f"4 runs (threads 1, 8, 1, 8) bit-identical: {same}"


def check_metric_identity():
    r = np.random.default_rng(99)
    worst = 0.0
    for _ in range(1000):
        c = int(r.integers(2, 8))
        cm = r.integers(0, 1000, (c, c)) * (r.random((c, c)) < 0.8)
        s = class_scores(ConfusionMatrix(cm))
        m = s.present & np.isfinite(s.f1)
        worst = max(worst, float(np.abs(s.iou[m] - s.f1[m] / (2 - s.f1[m])).max(initial=0.0)))
    return worst <= METRIC_TOL, f"max |IoU - F1/(2-F1)| {worst:.1e} over 1000 matrices (<= {METRIC_TOL:g})"


CHECKS = [
    ("equivalence", check_equivalence), ("initialization independence", check_independence),
    ("iteration gain", check_iteration_gain), ("filtering gain", check_filtering),
    ("homography gain", check_homography), ("gap degradation", check_gap),
    ("exact recovery", check_exact_recovery), ("conservation", check_conservation),
    ("format fidelity", check_format), ("homography estimator", check_lmeds),
    ("determinism", check_determinism), ("metric identity", check_metric_identity),
]


@pytest.mark.parametrize("name,fn", CHECKS, ids=[c[0].replace(" ", "_") for c in CHECKS])
def test_acceptance(name, fn, tmp_path):
    ok, detail = fn(tmp_path) if fn is check_determinism else fn()
    assert report(name, ok, detail), detail


if __name__ == "__main__":
    import tempfile

    failed = 0
    for name, fn in CHECKS:
        with tempfile.TemporaryDirectory() as d:
            ok, detail = fn(d) if fn is check_determinism else fn()
        failed += not report(name, ok, detail)
    sys.exit(1 if failed else 0)
