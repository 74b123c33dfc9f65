"""Deterministic synthetic videos with exact labels and exact flow.

Objects are analytic shapes (box, disk, polygon) placed by a per-frame 3x3
pose. Labels are sampled at pixel centres; flow at a pixel is the motion of
the surface point of the topmost object covering it, so labels and flow never
disagree. Later objects occlude earlier ones; uncovered pixels belong to the
background, whose flow is the background translation.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import LabelMap
from .errors import InvalidScript
from .flowio import FlowField

SHAPES = ("box", "disk", "polygon")
SCRIPT_NAMES = ("a_static", "b_translation", "c_projective", "d_crossing", "e_articulated")
NOISE_LEVELS = (0.0, 0.15, 0.3)


@dataclass(frozen=True)
class Motion:
    """Pose over time: translate, rotate, scale, then a projective tilt.

    Each term is ``base + rate * t + amp * sin(2 pi t / period + phase)``.
    """

    center: tuple[float, float] = (0.0, 0.0)
    velocity: tuple[float, float] = (0.0, 0.0)
    amplitude: tuple[float, float] = (0.0, 0.0)
    period: float = 100.0
    phase: float = 0.0
    angle: float = 0.0
    angle_rate: float = 0.0
    angle_amp: float = 0.0
    angle_period: float = 100.0
    scale_amp: float = 0.0
    tilt_amp: tuple[float, float] = (0.0, 0.0)
    tilt_period: float = 100.0

    def matrix(self, t: float) -> np.ndarray:
        s = math.sin(2 * math.pi * t / self.period + self.phase)
        tx = self.center[0] + self.velocity[0] * t + self.amplitude[0] * s
        ty = self.center[1] + self.velocity[1] * t + self.amplitude[1] * s
        th = self.angle + self.angle_rate * t + self.angle_amp * math.sin(2 * math.pi * t / self.angle_period)
        sc = 1.0 + self.scale_amp * s
        st = math.sin(2 * math.pi * t / self.tilt_period)
        c, sn = math.cos(th), math.sin(th)
        trs = np.array([[sc * c, -sc * sn, tx], [sc * sn, sc * c, ty], [0.0, 0.0, 1.0]])
        tilt = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                         [self.tilt_amp[0] * st, self.tilt_amp[1] * st, 1.0]])
        return trs @ tilt


@dataclass(frozen=True)
class SceneObject:
    shape: str
    cls: int
    params: tuple[float, ...]
    motion: Motion = Motion()
    parent: int = -1  # index of an earlier object whose pose this one rides on

    def contains(self, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
        p = self.params
        if self.shape == "box":
            x0, y0, x1, y1 = p
            return (lx >= x0) & (lx < x1) & (ly >= y0) & (ly < y1)
        if self.shape == "disk":
            cx, cy, r = p
            return (lx - cx) ** 2 + (ly - cy) ** 2 < r * r
        return _point_in_polygon(lx, ly, np.asarray(p, dtype=np.float64).reshape(-1, 2))


def _point_in_polygon(x: np.ndarray, y: np.ndarray, verts: np.ndarray) -> np.ndarray:
    inside = np.zeros(np.shape(x), dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xint)
    return inside


@dataclass(frozen=True)
class SceneScript:
    name: str
    width: int
    height: int
    num_frames: int
    num_classes: int
    objects: tuple[SceneObject, ...]
    background: int = 0
    background_velocity: tuple[float, float] = (0.0, 0.0)
    seed: int = 0
    flow_noise: float = 0.0
    label_noise: float = 0.0

    def validate(self) -> None:
        if self.width < 1 or self.height < 1 or self.num_frames < 1:
            raise InvalidScript("canvas and frame count must be positive")
        if not 0 < self.num_classes <= 255:
            raise InvalidScript("num_classes must be in 1..255")
        if not 0 <= self.background < self.num_classes:
            raise InvalidScript("background class out of range")
        if self.flow_noise < 0 or not 0 <= self.label_noise <= 1:
            raise InvalidScript("noise parameters out of range")
        for i, ob in enumerate(self.objects):
            if ob.shape not in SHAPES:
                raise InvalidScript(f"object {i}: unknown shape {ob.shape!r}")
            if not 0 <= ob.cls < self.num_classes:
                raise InvalidScript(f"object {i}: class {ob.cls} out of range")
            if ob.parent >= i:
                raise InvalidScript(f"object {i}: parent must be an earlier object")
            need = {"box": 4, "disk": 3}.get(ob.shape)
            if need is not None and len(ob.params) != need:
                raise InvalidScript(f"object {i}: {ob.shape} takes {need} params")
            if ob.shape == "polygon" and (len(ob.params) < 6 or len(ob.params) % 2):
                raise InvalidScript(f"object {i}: polygon needs >= 3 (x, y) vertices")
            if ob.motion.period == 0 or ob.motion.angle_period == 0 or ob.motion.tilt_period == 0:
                raise InvalidScript(f"object {i}: periods must be non-zero")

    def pose(self, i: int, t: float) -> np.ndarray:
        ob = self.objects[i]
        m = ob.motion.matrix(t)
        return self.pose(ob.parent, t) @ m if ob.parent >= 0 else m

    @property
    def benchmark_id(self) -> str:
        digest = hashlib.sha1(dumps_script(self).encode()).hexdigest()[:10]
        return f"{self.name}-{digest}"


@dataclass
class Rendered:
    frames: list[np.ndarray]
    labels: list[LabelMap]
    gt_fw: list[FlowField]
    gt_bw: list[FlowField]
    fw: list[FlowField]
    bw: list[FlowField]
    owner: list[np.ndarray] = field(repr=False, default_factory=list)


def _apply(h: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    den = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    return (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / den, (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / den


def _texture(lx: np.ndarray, ly: np.ndarray, cls: int) -> np.ndarray:
    base = 40.0 + (cls * 67) % 160
    return base + 28.0 * np.sin(0.9 * lx + 0.4 * ly) + 22.0 * np.cos(0.5 * lx - 1.1 * ly)


def owner_map(script: SceneScript, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Index of the topmost object covering each point, -1 for background."""
    owner = np.full(np.shape(x), -1, dtype=np.int64)
    for i, ob in enumerate(script.objects):
        lx, ly = _apply(np.linalg.inv(script.pose(i, t)), x, y)
        owner[ob.contains(lx, ly)] = i
    return owner


def _point_motion(script: SceneScript, owner: np.ndarray, t0: float, t1: float,
                  x: np.ndarray, y: np.ndarray) -> np.ndarray:
    flow = np.empty(x.shape + (2,))
    bg = np.asarray(script.background_velocity, dtype=np.float64) * (t1 - t0)
    flow[...] = bg
    for i in range(len(script.objects)):
        m = owner == i
        if not m.any():
            continue
        h = script.pose(i, t1) @ np.linalg.inv(script.pose(i, t0))
        qx, qy = _apply(h, x[m], y[m])
        flow[m, 0] = qx - x[m]
        flow[m, 1] = qy - y[m]
    return flow


def render(script: SceneScript) -> Rendered:
    """Frames, exact labels and flows (plus noisy flows when ``flow_noise`` > 0)."""
    script.validate()
    h, w = script.height, script.width
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    cls_of = np.array([ob.cls for ob in script.objects] + [script.background], dtype=np.uint8)
    frames, labels, owners = [], [], []
    for t in range(script.num_frames):
        owner = owner_map(script, t, x, y)
        owners.append(owner)
        lab = cls_of[owner]  # owner -1 indexes the trailing background entry
        if script.label_noise > 0:
            lab = plant_label_noise(lab, script.num_classes, script.label_noise, (script.seed, t, 7))
        labels.append(LabelMap(lab, script.num_classes))
        img = np.empty((h, w))
        bgx = x - script.background_velocity[0] * t
        bgy = y - script.background_velocity[1] * t
        img[...] = _texture(bgx, bgy, script.background)
        for i, ob in enumerate(script.objects):
            m = owner == i
            if m.any():
                lx, ly = _apply(np.linalg.inv(script.pose(i, t)), x[m], y[m])
                img[m] = _texture(lx, ly, ob.cls + 1)
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))

    gt_fw, gt_bw, fw, bw = [], [], [], []
    for t in range(script.num_frames - 1):
        f = FlowField(_point_motion(script, owners[t], t, t + 1, x, y).astype(np.float32))
        b = FlowField(_point_motion(script, owners[t + 1], t + 1, t, x, y).astype(np.float32))
        gt_fw.append(f)
        gt_bw.append(b)
        fw.append(perturb_flow(f, script.flow_noise, (script.seed, t, 0)))
        bw.append(perturb_flow(b, script.flow_noise, (script.seed, t, 1)))
    return Rendered(frames, labels, gt_fw, gt_bw, fw, bw, owners)


def perturb_flow(flow: FlowField, sigma: float, seed) -> FlowField:
    """Add i.i.d. zero-mean Gaussian noise to both flow components."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return flow
    rng = np.random.default_rng(seed)
    noisy = flow.data.astype(np.float64) + rng.normal(0.0, sigma, size=flow.data.shape)
    return FlowField(noisy.astype(flow.data.dtype), flow.valid)


def plant_label_noise(labels: np.ndarray, num_classes: int, rate: float, seed) -> np.ndarray:
    """Reassign a ``rate`` fraction of pixels to a different random class."""
    rng = np.random.default_rng(seed)
    out = np.array(labels, dtype=np.uint8, copy=True)
    n = int(round(rate * out.size))
    if n == 0 or num_classes < 2:
        return out
    idx = rng.choice(out.size, size=n, replace=False)
    shift = rng.integers(1, num_classes, size=n)
    flat = out.reshape(-1)
    flat[idx] = (flat[idx].astype(np.int64) + shift) % num_classes
    return out


# ---------------------------------------------------------------------------
# standard benchmark

def _script(name: str, w: int, h: int, n: int, seed: int, noise: float) -> SceneScript:
    if name not in SCRIPT_NAMES:
        raise InvalidScript(f"unknown benchmark script {name!r}")
    rng = np.random.default_rng([seed, SCRIPT_NAMES.index(name)])
    ph = float(rng.uniform(0, 2 * math.pi))
    jx, jy = (float(v) for v in rng.uniform(-0.04, 0.04, size=2))
    cx, cy = w * (0.5 + jx), h * (0.5 + jy)
    if name == "a_static":
        objs = (
            SceneObject("box", 1, (-0.15 * w, -0.12 * h, 0.15 * w, 0.12 * h), Motion(center=(0.32 * w, 0.35 * h))),
            SceneObject("disk", 2, (0.0, 0.0, 0.15 * w), Motion(center=(0.68 * w, 0.66 * h))),
        )
    elif name == "b_translation":
        objs = (
            SceneObject("disk", 2, (0.0, 0.0, 0.12 * w), Motion(center=(0.78 * w, 0.78 * h))),
            SceneObject("box", 1, (-0.16 * w, -0.11 * h, 0.16 * w, 0.11 * h),
                        Motion(center=(cx, cy - 0.08 * h), amplitude=(0.2 * w, 0.1 * h), period=90.0, phase=ph)),
        )
    elif name == "c_projective":
        objs = (
            SceneObject("box", 1, (-0.17 * w, -0.12 * h, 0.17 * w, 0.12 * h),
                        Motion(center=(cx, cy), amplitude=(0.12 * w, 0.08 * h), period=110.0, phase=ph,
                               angle_amp=0.45, angle_period=80.0, scale_amp=0.12,
                               tilt_amp=(0.012, 0.009), tilt_period=70.0)),
        )
    elif name == "d_crossing":
        # one slow, non-recurring pass: the objects cross near the middle frame
        # and never return to an earlier pose within the sequence
        ph_d = -2 * math.pi * (0.5 * (n - 1)) / 400.0 + 0.3 * (ph / math.pi - 1.0)
        objs = (
            SceneObject("box", 1, (-0.14 * w, -0.1 * h, 0.14 * w, 0.1 * h),
                        Motion(center=(cx, 0.42 * h), amplitude=(0.3 * w, 0.0), period=400.0, phase=ph_d)),
            SceneObject("disk", 2, (0.0, 0.0, 0.13 * w),
                        Motion(center=(cx, 0.58 * h), amplitude=(-0.3 * w, 0.04 * h), period=400.0, phase=ph_d)),
        )
    elif name == "e_articulated":
        body = SceneObject("box", 1, (-0.13 * w, -0.1 * h, 0.13 * w, 0.1 * h),
                           Motion(center=(0.38 * w + jx * w, cy), amplitude=(0.06 * w, 0.05 * h),
                                  period=120.0, phase=ph))
        arm = SceneObject("box", 1, (-0.02 * w, -0.06 * h, 0.36 * w, 0.06 * h),
                          Motion(center=(0.11 * w, 0.0), angle_amp=1.0, angle_period=60.0), parent=0)
        objs = (body, arm)
    else:
        raise InvalidScript(f"unknown benchmark script {name!r}")
    return SceneScript(name=name, width=w, height=h, num_frames=n, num_classes=3, objects=objs,
                       seed=seed, flow_noise=noise)


def standard_benchmark(seed: int = 0, num_frames: int = 151, width: int = 48, height: int = 48,
                       noise_levels: Sequence[float] = NOISE_LEVELS) -> list[SceneScript]:
    """Five scripts at each noise level: static, translation, projective,
    crossing (occlusion) and articulated."""
    return [_script(name, width, height, num_frames, seed, float(s))
            for name in SCRIPT_NAMES for s in noise_levels]


def benchmark_script(name: str, noise_level: int = 0, seed: int = 0, **kw) -> SceneScript:
    levels = kw.pop("noise_levels", NOISE_LEVELS)
    return _script(name, kw.get("width", 48), kw.get("height", 48), kw.get("num_frames", 151),
                   seed, float(levels[noise_level]))


# ---------------------------------------------------------------------------
# key=value serialization

def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps_script(script: SceneScript) -> str:
    lines = []
    for f in dataclasses.fields(SceneScript):
        if f.name != "objects":
            lines.append(f"{f.name}={_fmt(getattr(script, f.name))}")
    lines.append(f"objects={len(script.objects)}")
    for i, ob in enumerate(script.objects):
        for f in dataclasses.fields(SceneObject):
            if f.name == "motion":
                for mf in dataclasses.fields(Motion):
                    lines.append(f"object.{i}.motion.{mf.name}={_fmt(getattr(ob.motion, mf.name))}")
            else:
                lines.append(f"object.{i}.{f.name}={_fmt(getattr(ob, f.name))}")
    return "\n".join(lines) + "\n"


def _parse(value: str, default):
    if isinstance(default, tuple):
        return tuple(float(x) for x in value.split(",")) if value else ()
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


_SCRIPT_DEFAULTS = {"name": "", "width": 0, "height": 0, "num_frames": 0, "num_classes": 0, "background": 0,
                    "background_velocity": (0.0, 0.0), "seed": 0, "flow_noise": 0.0, "label_noise": 0.0}
_OBJECT_DEFAULTS = {"shape": "", "cls": 0, "params": (), "parent": 0}


def loads_script(text: str) -> SceneScript:
    kv = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidScript(f"line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    try:
        top = {k: _parse(kv[k], d) for k, d in _SCRIPT_DEFAULTS.items() if k in kv}
        n_obj = int(kv.get("objects", "0"))
        objs = []
        motion_defaults = Motion()
        for i in range(n_obj):
            pre = f"object.{i}."
            ob = {k: _parse(kv[pre + k], d) for k, d in _OBJECT_DEFAULTS.items() if pre + k in kv}
            mot = {}
            for mf in dataclasses.fields(Motion):
                key = f"{pre}motion.{mf.name}"
                if key in kv:
                    mot[mf.name] = _parse(kv[key], getattr(motion_defaults, mf.name))
            objs.append(SceneObject(motion=Motion(**mot), **ob))
        script = SceneScript(objects=tuple(objs), **top)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidScript(f"malformed script: {exc}") from exc
    script.validate()
    return script


def plant_vote_noise(volumes: np.ndarray, frames: Sequence[int], rate: float, seed, mass: float = 1.0) -> np.ndarray:
    """Salt-and-pepper noise on vote volumes ``(N, C, H, W)``.

    In each listed frame a ``rate`` fraction of pixels is reset to a one-hot
    vote for a class other than its current argmax.
    """
    out = np.array(volumes, dtype=np.float64, copy=True)
    c = out.shape[1]
    for k in frames:
        lab = out[k].argmax(axis=0)
        noisy = plant_label_noise(lab, c, rate, (seed, k, 11)) if c <= 256 else lab
        hit = noisy != lab
        out[k][:, hit] = 0.0
        ys, xs = np.nonzero(hit)
        out[k][noisy[ys, xs].astype(np.int64), ys, xs] = mass
    return out
