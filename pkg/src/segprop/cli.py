"""``segprop`` command line: propagate, eval, synth, spectral-check, overlay."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod
from .core import (IGNORE_INDEX, ClassPalette, LabelMap, SequenceSpec, read_image, read_label_map,
                   read_palette, write_label_map, write_palette, write_pgm, write_ppm)
from .errors import ConfigError, MissingFlow, SegPropError
from .evalmetrics import class_scores, confusion, format_scores, sequence_confusion
from .flowio import FlowBank, FlowField, estimate_flow_translational, read_flow_dirs, write_flow_dirs
from .kernels import BACKEND_NAME
from .pipeline import run_propagation

log = logging.getLogger("segprop")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_MISSING = 2
EXIT_CONFIG = 3
EXIT_PROPAGATION = 4

_INDEXED = re.compile(r"^(\d{6})\.(pgm|ppm)$")


class MissingInput(Exception):
    pass


def _indexed_files(d: Path) -> dict[int, Path]:
    if not d.is_dir():
        raise MissingInput(f"not a directory: {d}")
    out = {}
    for p in d.iterdir():
        m = _INDEXED.match(p.name)
        if m:
            out[int(m.group(1))] = p
    return dict(sorted(out.items()))


def _resolve_config(args) -> cfgmod.RunConfig:
    base: dict[str, str] = {}
    if args.config:
        try:
            base = cfgmod.parse_pairs(Path(args.config).read_text(), args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    conf = cfgmod.apply(cfgmod.RunConfig(), base)
    over: dict[str, str] = {}
    if args.threads is None and "threads" not in base:
        over["threads"] = str(os.cpu_count() or 1)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        over[k.strip()] = v.strip()
    if args.threads is not None:
        over["threads"] = str(args.threads)
    if args.seed is not None:
        over["seed"] = str(args.seed)
        over.setdefault("homography.seed", str(args.seed))
    if getattr(args, "iters", None) is not None:
        if args.iters < 1:
            raise ConfigError("--iters must be >= 1")
        # iteration 1 is the initialization; each further iteration is one pass
        over["max_iters"] = str(args.iters - 1)
        over.setdefault("epsilon", "0")
    return cfgmod.apply(conf, over) if over else conf.validate()


def _write_kv(path: Path, items) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in items))


# ---------------------------------------------------------------------------
# propagate

def _manifest_items(args, conf, extra=()):
    items = [("tool", "segprop"), ("version", __version__), ("kernel_backend", BACKEND_NAME),
             ("input.labels", os.path.abspath(args.labels)),
             ("input.flows", os.path.abspath(args.flows) if args.flows else ""),
             ("input.frames", os.path.abspath(args.frames) if args.frames else ""),
             ("input.config", os.path.abspath(args.config) if args.config else ""),
             ("estimate_flow", str(bool(args.estimate_flow)).lower()),
             ("output", os.path.abspath(args.out))]
    items += [(f"config.{k}", v) for k, v in conf.resolved().items()]
    return items + list(extra)


def cmd_propagate(args) -> int:
    conf = _resolve_config(args)
    out = Path(args.out)
    label_files = _indexed_files(Path(args.labels))
    if len(label_files) < 2:
        raise MissingInput(f"need >= 2 keyframe label maps in {args.labels}, found {len(label_files)}")
    frame_files = _indexed_files(Path(args.frames)) if args.frames else {}
    if args.num_frames is not None:
        n = args.num_frames
    elif frame_files:
        n = max(frame_files) + 1
    elif args.flows:
        fw_dir = Path(args.flows) / "flow_fw"
        if not fw_dir.is_dir():
            raise MissingInput(f"missing {fw_dir}")
        n = len([p for p in fw_dir.iterdir() if p.suffix == ".flo"]) + 1
    else:
        raise MissingInput("cannot tell the frame count: give --num-frames, --frames or --flows")
    if max(label_files) >= n:
        raise MissingInput(f"keyframe {max(label_files)} outside the {n}-frame sequence")

    raw = {k: np.asarray(read_image(p)) for k, p in label_files.items()}
    if args.palette:
        num_classes = len(read_palette(args.palette))
    elif args.num_classes:
        num_classes = args.num_classes
    else:
        num_classes = int(max(int(a[a != IGNORE_INDEX].max(initial=0)) for a in raw.values())) + 1
    keyframe_labels = {k: LabelMap(a, num_classes) for k, a in raw.items()}

    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.txt"
    _write_kv(manifest, _manifest_items(args, conf))

    t0 = time.perf_counter()
    if args.estimate_flow:
        if len(frame_files) < n or any(t not in frame_files for t in range(n)):
            raise MissingInput(f"--estimate-flow needs frames 0..{n - 1} in {args.frames}")
        frames = [read_image(frame_files[t]) for t in range(n)]
        fw = [estimate_flow_translational(frames[t], frames[t + 1]) for t in range(n - 1)]
        bw = [estimate_flow_translational(frames[t + 1], frames[t]) for t in range(n - 1)]
    elif args.flows:
        try:
            fw, bw = read_flow_dirs(args.flows, n)
        except MissingFlow as exc:
            raise MissingInput(str(exc)) from None
    else:
        raise MissingInput("give --flows or --estimate-flow")
    flows = FlowBank(fw, bw)
    t_flow = time.perf_counter() - t0

    res = run_propagation(conf, keyframe_labels, flows, n, num_classes)
    (out / "labels").mkdir(exist_ok=True)
    for k, lab in enumerate(res.labels):
        write_label_map(out / "labels" / f"{k:06d}.pgm", lab)
    with open(out / "history.txt", "w") as fh:
        fh.write("pass changed_fraction\n")
        for i, frac in enumerate(res.history, start=1):
            fh.write(f"{i} {frac!r}\n")
    one_sided = sorted(res.state.one_sided)
    timings = {"flow": t_flow, **res.timings}
    _write_kv(manifest, _manifest_items(args, conf, [
        ("num_frames", n), ("num_classes", num_classes),
        ("keyframes", ",".join(str(k) for k in sorted(keyframe_labels))),
        ("one_sided_frames", ",".join(str(k) for k in one_sided)),
        ("passes", res.passes)] + [(f"timing.{k}", f"{v:.6f}") for k, v in timings.items()]))
    log.info("propagated %d frames in %d passes", n, res.passes)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    pred = _indexed_files(Path(args.pred))
    gt = _indexed_files(Path(args.gt))
    frames = sorted(set(gt)) if args.frames is None else [int(f) for f in args.frames.split(",")]
    missing = [f for f in frames if f not in pred or f not in gt]
    if missing or (args.frames is None and set(pred) != set(gt)):
        print(f"frame sets differ (e.g. {missing[:5] or sorted(set(pred) ^ set(gt))[:5]})", file=sys.stderr)
        return EXIT_MISSING
    if not frames:
        print("no frames to evaluate", file=sys.stderr)
        return EXIT_MISSING
    gts = [read_image(gt[f]) for f in frames]
    preds = [read_image(pred[f]) for f in frames]
    palette = read_palette(args.palette) if args.palette else None
    if palette is not None:
        c = len(palette)
    elif args.num_classes:
        c = args.num_classes
    else:
        c = int(max(max(int(a[a != IGNORE_INDEX].max(initial=0)) for a in gts),
                    max(int(a[a != IGNORE_INDEX].max(initial=0)) for a in preds))) + 1
    cm = sequence_confusion([LabelMap(p, c) for p in preds], [LabelMap(g, c) for g in gts], c)
    scores = class_scores(cm)
    names = [e.name for e in palette.entries] if palette is not None else None
    print(format_scores(scores, names))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["frame", "class", "name", "f1", "iou", "present"])
            rows = [(f, class_scores(confusion(LabelMap(p, c), LabelMap(g, c), c)))
                    for f, p, g in zip(frames, preds, gts)] + [("all", scores)]
            for f, sc in rows:
                for i in range(c):
                    name = names[i] if names else f"class{i}"
                    wr.writerow([f, i, name, repr(float(sc.f1[i])), repr(float(sc.iou[i])), int(sc.present[i])])
    if args.out:
        _write_kv(Path(args.out), [("frames", len(frames)), ("num_classes", c), ("mf1", repr(scores.mf1)),
                                   ("miou", repr(scores.miou))]
                  + [(f"class.{i}.f1", repr(float(scores.f1[i]))) for i in range(c)]
                  + [(f"class.{i}.iou", repr(float(scores.iou[i]))) for i in range(c)])
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    from .synthgen import benchmark_script, dumps_script, loads_script, render

    if args.script:
        if not Path(args.script).is_file():
            raise MissingInput(f"missing script {args.script}")
        script = loads_script(Path(args.script).read_text())
    else:
        kw = {k: v for k, v in (("num_frames", args.num_frames), ("width", args.width),
                                ("height", args.height)) if v is not None}
        script = benchmark_script(args.benchmark, args.noise_level, args.seed or 0, **kw)
    r = render(script)
    out = Path(args.out)
    for sub in ("frames", "labels", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for t, (img, lab) in enumerate(zip(r.frames, r.labels)):
        write_pgm(out / "frames" / f"{t:06d}.pgm", img)
        write_label_map(out / "gt" / f"{t:06d}.pgm", lab)
        if args.keyframe_every and t % args.keyframe_every == 0:
            write_label_map(out / "labels" / f"{t:06d}.pgm", lab)
    if args.keyframe_every and (script.num_frames - 1) % args.keyframe_every:
        t = script.num_frames - 1
        write_label_map(out / "labels" / f"{t:06d}.pgm", r.labels[t])
    write_flow_dirs(out, r.fw, r.bw)
    write_flow_dirs(out / "gt_flow", r.gt_fw, r.gt_bw)
    write_palette(out / "palette.txt", ClassPalette.default(script.num_classes))
    (out / "script.txt").write_text(dumps_script(script))
    print(script.benchmark_id)
    return EXIT_OK


# ---------------------------------------------------------------------------
# spectral-check

def cmd_spectral_check(args) -> int:
    from .spectral import verify_equivalence
    from .synthgen import benchmark_script, render

    conf = _resolve_config(args)
    if args.data:
        root = Path(args.data)
        label_files = _indexed_files(root / "labels")
        n = args.num_frames or len(_indexed_files(root / "frames"))
        raw = {k: read_image(p) for k, p in label_files.items()}
        c = args.num_classes or int(max(int(a.max()) for a in raw.values())) + 1
        keyframe_labels = {k: LabelMap(a, c) for k, a in raw.items()}
        fw, bw = read_flow_dirs(root, n)
        h, w = next(iter(raw.values())).shape
    else:
        n = args.num_frames or 7
        script = benchmark_script(args.benchmark, args.noise_level, args.seed or 0, num_frames=n,
                                  width=args.width or 16, height=args.height or 16)
        r = render(script)
        c, h, w = script.num_classes, script.height, script.width
        fw, bw = r.fw, r.bw
        keyframe_labels = {0: r.labels[0], n - 1: r.labels[n - 1]}
    spec = conf.sequence_spec(n, w, h, c, keyframe_labels.keys())
    report = verify_equivalence(spec, FlowBank(fw, bw), keyframe_labels, iters=args.iters,
                                inject_fault=args.inject_fault, tolerance=args.tolerance)
    sys.stdout.write(report.to_text())
    if args.out:
        report.write(args.out)
    return EXIT_OK if report.ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# overlay

def blend(frame: np.ndarray, labels: np.ndarray, palette: ClassPalette, alpha: float = 0.5) -> np.ndarray:
    rgb = np.repeat(frame[..., None], 3, axis=2) if frame.ndim == 2 else frame
    colors = np.zeros((256, 3), dtype=np.float64)
    colors[: len(palette)] = palette.colors()
    tint = colors[labels]
    out = (1.0 - alpha) * rgb.astype(np.float64) + alpha * tint
    keep = labels == IGNORE_INDEX
    out[keep] = rgb[keep]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def cmd_overlay(args) -> int:
    labels = _indexed_files(Path(args.labels))
    frames = _indexed_files(Path(args.frames))
    common = sorted(set(labels) & set(frames))
    if not common:
        raise MissingInput("no frames with both an image and a label map")
    palette = read_palette(args.palette) if args.palette else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in common:
        lab = read_image(labels[t])
        pal = palette or ClassPalette.default(int(lab[lab != IGNORE_INDEX].max(initial=0)) + 1)
        write_ppm(out / f"{t:06d}.ppm", blend(read_image(frames[t]), lab, pal, args.alpha))
    return EXIT_OK


# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--verbose", "-v", action="store_true")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="segprop", description="Iterative flow-based label propagation.")
    ap.add_argument("--version", action="version", version=f"segprop {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("propagate", help="propagate keyframe labels to every frame")
    _common(p)
    p.add_argument("--labels", required=True, help="dir of keyframe label maps %%06d.pgm")
    p.add_argument("--flows", help="dir holding flow_fw/ and flow_bw/")
    p.add_argument("--frames", help="dir of frames %%06d.pgm/ppm")
    p.add_argument("--out", required=True)
    p.add_argument("--num-frames", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--palette")
    p.add_argument("--iters", type=int, help="iterations, counting the initialization as the first")
    p.add_argument("--estimate-flow", action="store_true", help="block-matching flow from the frames")
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("eval", help="score predicted label maps against ground truth")
    _common(p)
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--palette")
    p.add_argument("--frames", help="comma-separated frame indices (default: all ground-truth frames)")
    p.add_argument("--csv", help="per (frame, class) scores")
    p.add_argument("--out", help="key=value summary file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="render a synthetic sequence")
    _common(p)
    p.add_argument("out")
    p.add_argument("--script", help="key=value scene script")
    p.add_argument("--benchmark", default="b_translation")
    p.add_argument("--noise-level", type=int, default=0)
    p.add_argument("--num-frames", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--keyframe-every", type=int, default=0,
                   help="also write ground truth of every n-th frame (and the last) to labels/")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("spectral-check", help="compare voting passes with explicit power iteration")
    _common(p)
    p.add_argument("--data", help="synth output dir (labels/, frames/, flow_fw/, flow_bw/)")
    p.add_argument("--benchmark", default="b_translation")
    p.add_argument("--noise-level", type=int, default=1)
    p.add_argument("--num-frames", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--iters", type=int, default=7)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--inject-fault", choices=["lambda"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_spectral_check)

    p = sub.add_parser("overlay", help="alpha-blend label colors over frames")
    _common(p)
    p.add_argument("--labels", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--palette")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInput, FileNotFoundError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except SegPropError as exc:
        print(f"propagation error: {exc}", file=sys.stderr)
        return EXIT_PROPAGATION


if __name__ == "__main__":
    sys.exit(main())
