"""Value types shared across the package: hard label maps, soft vote volumes,
class palettes and the sequence/propagation parameters.

Volumes are stored as ``(num_classes, height, width)`` float64 planes so that
per-class operations (warping, filtering) act on contiguous 2D arrays.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, FormatError

IGNORE_INDEX = 255
TIE_TOL = 1e-9


@dataclass(frozen=True)
class LabelMap:
    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if data.ndim != 2:
            raise DimensionMismatch(f"label map must be 2D, got shape {data.shape}")
        if not 0 < self.num_classes <= 256:
            raise ValueError(f"num_classes out of range: {self.num_classes}")
        valid = data[data != IGNORE_INDEX] if self.num_classes < 256 else data
        if valid.size and int(valid.max()) >= self.num_classes:
            raise ValueError(f"class index {int(valid.max())} >= num_classes {self.num_classes}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class VoteVolume:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise DimensionMismatch(f"vote volume must be (C, H, W), got shape {data.shape}")
        if data.size and not (data >= 0).all():
            raise ValueError("vote volume entries must be non-negative")
        object.__setattr__(self, "data", data)

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def class_sum(self) -> np.ndarray:
        return self.data.sum(axis=0)

    __hash__ = None


@dataclass(frozen=True)
class ClassEntry:
    index: int
    name: str
    color: tuple[int, int, int]


@dataclass(frozen=True)
class ClassPalette:
    entries: tuple[ClassEntry, ...]

    def __post_init__(self):
        for i, e in enumerate(self.entries):
            if e.index != i:
                raise ValueError(f"palette indices must be dense from 0; got {e.index} at position {i}")
        colors = [e.color for e in self.entries]
        if len(set(colors)) != len(colors):
            raise ValueError("palette colors must be unique")

    def __len__(self):
        return len(self.entries)

    def colors(self) -> np.ndarray:
        return np.array([e.color for e in self.entries], dtype=np.uint8).reshape(-1, 3)

    @classmethod
    def default(cls, num_classes: int) -> "ClassPalette":
        """Evenly spread hues; used when no palette file is given."""
        import colorsys

        entries = []
        for i in range(num_classes):
            r, g, b = colorsys.hsv_to_rgb(i / max(num_classes, 1), 0.8, 0.95 if i % 2 else 0.7)
            entries.append(ClassEntry(i, f"class{i}", (int(r * 255), int(g * 255), int(b * 255))))
        return cls(tuple(entries))


@dataclass(frozen=True)
class SequenceSpec:
    num_frames: int
    width: int
    height: int
    num_classes: int
    keyframes: tuple[int, ...]
    lam: float = 0.05
    f: int = 2
    stride: int = 5
    max_iters: int = 7
    total_vote_mass: float = 1.0
    epsilon: float = 1e-4
    offsets: tuple[int, ...] | None = field(default=None)

    def __post_init__(self):
        kf = tuple(int(k) for k in self.keyframes)
        object.__setattr__(self, "keyframes", kf)
        if any(b <= a for a, b in zip(kf, kf[1:])):
            raise ValueError(f"keyframes must be strictly increasing: {kf}")
        if kf and (kf[0] < 0 or kf[-1] >= self.num_frames):
            raise ValueError(f"keyframes outside [0, {self.num_frames}): {kf}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.f < 1 or self.stride < 1:
            raise ValueError("f and stride must be >= 1")
        if self.total_vote_mass <= 0:
            raise ValueError("total_vote_mass must be > 0")
        if self.offsets is not None:
            offs = tuple(int(o) for o in self.offsets)
            if not offs or 0 in offs:
                raise ValueError("offsets must be non-empty and exclude 0")
            object.__setattr__(self, "offsets", offs)

    @property
    def neighbor_offsets(self) -> tuple[int, ...]:
        if self.offsets is not None:
            return self.offsets
        steps = [self.stride * n for n in range(1, self.f + 1)]
        return tuple(sorted([-s for s in steps] + steps))

    @property
    def frame_shape(self) -> tuple[int, int]:
        return (self.height, self.width)


def one_hot(labels: LabelMap, mass: float = 1.0) -> VoteVolume:
    """Put ``mass`` on each pixel's class channel. Ignore-index pixels get no mass."""
    c = labels.num_classes
    out = np.zeros((c,) + labels.shape, dtype=np.float64)
    idx = labels.data
    for k in range(c):
        out[k][idx == k] = mass
    return VoteVolume(out)


def argmax_labels(votes: VoteVolume | np.ndarray) -> LabelMap:
    """Per-pixel class with the largest vote; ties go to the lowest class index."""
    data = votes.data if isinstance(votes, VoteVolume) else np.asarray(votes)
    # np.argmax returns the first maximal index, which is the tie rule we want.
    return LabelMap(np.argmax(data, axis=0).astype(np.uint8), data.shape[0])


def tie_mask(data: np.ndarray, tol: float = TIE_TOL) -> np.ndarray:
    top = data.max(axis=0)
    n_at_top = (data >= top - tol * np.maximum(1.0, np.abs(top))).sum(axis=0)
    return n_at_top >= 2


def tie_fraction(votes: VoteVolume | np.ndarray) -> float:
    """Fraction of pixels whose maximal vote is shared by two or more classes."""
    data = votes.data if isinstance(votes, VoteVolume) else np.asarray(votes)
    if data.shape[1] * data.shape[2] == 0:
        return 0.0
    return float(tie_mask(data).mean())


# ---------------------------------------------------------------------------
# PGM / PPM / palette files

def _read_netpbm_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if not buf.startswith(magic):
        raise FormatError(f"expected {magic!r} header")
    pos = 2
    vals = []
    while len(vals) < 3:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*").match(buf, pos)
        pos = m.end()
        m = re.compile(rb"\d+").match(buf, pos)
        if m is None:
            raise FormatError("malformed netpbm header")
        vals.append(int(m.group()))
        pos = m.end()
    # exactly one whitespace byte separates header from raster
    return vals[0], vals[1], vals[2], pos + 1


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, maxval, start = _read_netpbm_header(buf, b"P5")
    if maxval > 255:
        raise FormatError("only 8-bit PGM supported")
    raster = buf[start:start + w * h]
    if len(raster) != w * h:
        raise FormatError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(image.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, maxval, start = _read_netpbm_header(buf, b"P6")
    if maxval > 255:
        raise FormatError("only 8-bit PPM supported")
    raster = buf[start:start + w * h * 3]
    if len(raster) != w * h * 3:
        raise FormatError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(image.tobytes())


def read_image(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(2)
    return read_ppm(path) if magic == b"P6" else read_pgm(path)


def read_label_map(path: str | os.PathLike, num_classes: int) -> LabelMap:
    return LabelMap(read_pgm(path), num_classes)


def write_label_map(path: str | os.PathLike, labels: LabelMap) -> None:
    write_pgm(path, labels.data)


def read_palette(path: str | os.PathLike) -> ClassPalette:
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise FormatError(f"{path}:{lineno}: expected '<index> <name> <r> <g> <b>'")
            idx, name, r, g, b = parts
            entries.append(ClassEntry(int(idx), name, (int(r), int(g), int(b))))
    entries.sort(key=lambda e: e.index)
    return ClassPalette(tuple(entries))


def write_palette(path: str | os.PathLike, palette: ClassPalette) -> None:
    with open(path, "w") as fh:
        for e in palette.entries:
            fh.write(f"{e.index} {e.name} {e.color[0]} {e.color[1]} {e.color[2]}\n")


def stack_label_maps(maps: Iterable[LabelMap]) -> np.ndarray:
    return np.stack([m.data for m in maps])


def check_same_shape(*arrays: Sequence[int], what: str = "inputs") -> None:
    shapes = {tuple(a) for a in arrays}
    if len(shapes) > 1:
        raise DimensionMismatch(f"{what} have different shapes: {sorted(shapes)}")
