"""Dense flow fields: ``.flo`` file I/O, trajectory composition, and
gather/splat warping of vote volumes."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import kernels
from .core import VoteVolume
from .errors import BadMagic, DimensionMismatch, FormatError, MissingFlow, NonFiniteValue, TruncatedFile

FLO_MAGIC = 202021.25
_HEADER = struct.Struct("<fii")


@dataclass(frozen=True)
class FlowField:
    """Per-pixel (u, v) displacement, shape ``(h, w, 2)``.

    ``valid`` is ``None`` for plain fields; composed fields carry a boolean
    plane marking trajectories that stayed inside the image.
    """

    data: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 2:
            raise DimensionMismatch(f"flow must be (h, w, 2), got {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        object.__setattr__(self, "data", data)
        if self.valid is not None:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != data.shape[:2]:
                raise DimensionMismatch("validity plane does not match flow dimensions")
            object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def valid_mask(self) -> np.ndarray:
        return np.ones(self.shape, dtype=bool) if self.valid is None else self.valid

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2), dtype=np.float32))

    @classmethod
    def constant(cls, height: int, width: int, u: float, v: float) -> "FlowField":
        data = np.empty((height, width, 2), dtype=np.float32)
        data[..., 0] = u
        data[..., 1] = v
        return cls(data)

    __hash__ = None


FlowChain = Sequence[FlowField]


# ---------------------------------------------------------------------------
# .flo format

def read_flow(buf: bytes) -> FlowField:
    if len(buf) < 4:
        raise TruncatedFile("missing flow header")
    (magic,) = struct.unpack_from("<f", buf, 0)
    if magic != FLO_MAGIC:
        raise BadMagic(f"bad .flo magic {magic!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFile("missing flow dimensions")
    _, w, h = _HEADER.unpack_from(buf, 0)
    if w < 0 or h < 0:
        raise FormatError(f"negative flow dimensions {w}x{h}")
    n = w * h * 2 * 4
    payload = buf[_HEADER.size:]
    if len(payload) < n:
        raise TruncatedFile(f"expected {n} payload bytes, got {len(payload)}")
    if len(payload) > n:
        raise FormatError(f"{len(payload) - n} trailing bytes after flow payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).astype(np.float32)
    if not np.isfinite(data).all():
        raise NonFiniteValue("flow contains NaN or Inf")
    return FlowField(data)


def write_flow(field: FlowField) -> bytes:
    h, w = field.shape
    return _HEADER.pack(FLO_MAGIC, w, h) + np.ascontiguousarray(field.data, dtype="<f4").tobytes()


def read_flow_file(path: str | os.PathLike) -> FlowField:
    with open(path, "rb") as fh:
        return read_flow(fh.read())


def write_flow_file(path: str | os.PathLike, field: FlowField) -> None:
    with open(path, "wb") as fh:
        fh.write(write_flow(field))


def read_flow_dirs(root: str | os.PathLike, num_frames: int) -> tuple[list[FlowField], list[FlowField]]:
    """Load ``flow_fw/%06d.flo`` (t -> t+1) and ``flow_bw/%06d.flo`` (t+1 -> t)."""
    root = Path(root)
    fw, bw = [], []
    for t in range(num_frames - 1):
        for sub, dest in (("flow_fw", fw), ("flow_bw", bw)):
            p = root / sub / f"{t:06d}.flo"
            if not p.exists():
                raise MissingFlow(f"missing {p}")
            dest.append(read_flow_file(p))
    return fw, bw


def write_flow_dirs(root: str | os.PathLike, fw: Iterable[FlowField], bw: Iterable[FlowField]) -> None:
    root = Path(root)
    for sub, fields in (("flow_fw", fw), ("flow_bw", bw)):
        (root / sub).mkdir(parents=True, exist_ok=True)
        for t, f in enumerate(fields):
            write_flow_file(root / sub / f"{t:06d}.flo", f)


# ---------------------------------------------------------------------------
# composition and warping

def _f64(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def iter_compose(chain: Iterable[FlowField], shape: tuple[int, int] | None = None) -> Iterator[FlowField]:
    """Yield the composed field after each step of ``chain``.

    A trajectory starts at every pixel centre and advances by the bilinearly
    sampled displacement of each consecutive field. Trajectories that leave the
    image are marked invalid and stop moving.
    """
    pos_x = pos_y = valid = grid_x = grid_y = None
    for field in chain:
        if pos_x is None:
            h, w = field.shape if shape is None else shape
            grid_y, grid_x = np.mgrid[0:h, 0:w].astype(np.float64)
            pos_x, pos_y = grid_x.copy(), grid_y.copy()
            valid = np.ones((h, w), dtype=np.uint8)
        if field.shape != pos_x.shape:
            raise DimensionMismatch(f"flow chain dimensions differ: {field.shape} vs {pos_x.shape}")
        kernels.compose_step(pos_x, pos_y, valid, _f64(field.data))
        done = valid.copy()
        kernels.bounds_check(pos_x, pos_y, done)
        disp = np.stack([pos_x - grid_x, pos_y - grid_y], axis=-1)
        yield FlowField(disp, done.astype(bool))


def compose_flow(chain: FlowChain) -> FlowField:
    if len(chain) == 0:
        raise ValueError("cannot compose an empty flow chain")
    h, w = chain[0].shape
    grid_y, grid_x = np.mgrid[0:h, 0:w].astype(np.float64)
    pos_x, pos_y = grid_x.copy(), grid_y.copy()
    valid = np.ones((h, w), dtype=np.uint8)
    for field in chain:
        if field.shape != (h, w):
            raise DimensionMismatch(f"flow chain dimensions differ: {field.shape} vs {(h, w)}")
        kernels.compose_step(pos_x, pos_y, valid, _f64(field.data))
    kernels.bounds_check(pos_x, pos_y, valid)
    return FlowField(np.stack([pos_x - grid_x, pos_y - grid_y], axis=-1), valid.astype(bool))


def _check_dims(votes: VoteVolume, flow: FlowField) -> None:
    if (votes.height, votes.width) != flow.shape:
        raise DimensionMismatch(f"votes {votes.height}x{votes.width} vs flow {flow.shape[0]}x{flow.shape[1]}")


def _valid_u8(flow: FlowField) -> np.ndarray:
    return np.ascontiguousarray(flow.valid_mask(), dtype=np.uint8)


def warp_gather(votes: VoteVolume, flow: FlowField) -> tuple[VoteVolume, np.ndarray]:
    """Sample ``votes`` at ``p + flow(p)`` for every pixel ``p``.

    Returns the warped volume and a mask of pixels whose sample position was
    valid and inside the image; other pixels carry zero mass.
    """
    _check_dims(votes, flow)
    out, ok = kernels.gather(_f64(votes.data), _f64(flow.data), _valid_u8(flow))
    return VoteVolume(out), ok.astype(bool)


def warp_splat(votes: VoteVolume, flow: FlowField) -> tuple[VoteVolume, np.ndarray]:
    """Deposit each pixel's votes at ``p + flow(p)`` with bilinear weights.

    Returns the deposited (unnormalised) volume and the per-pixel sum of
    deposit weights. Mass landing outside the image is dropped.
    """
    _check_dims(votes, flow)
    out, wt = kernels.splat(_f64(votes.data), _f64(flow.data), _valid_u8(flow))
    return VoteVolume(out), wt


def _as_channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    return np.ascontiguousarray(img)


def _candidates(radius: int) -> np.ndarray:
    cands = [(dx, dy) for dx in range(-radius, radius + 1) for dy in range(-radius, radius + 1)]
    cands.sort(key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))
    return np.array(cands, dtype=np.int64).reshape(-1, 2)


def estimate_flow_translational(frame_a: np.ndarray, frame_b: np.ndarray, block: int = 8,
                                radius: int = 4) -> FlowField:
    """Crude block-matching flow from ``frame_a`` to ``frame_b``.

    Each ``block`` x ``block`` tile gets the integer displacement in
    ``[-radius, radius]^2`` with the lowest mean absolute difference; ties go
    to the smallest displacement, then lexicographic (dx, dy).
    """
    a, b = _as_channels(frame_a), _as_channels(frame_b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"frames differ in shape: {a.shape} vs {b.shape}")
    if block < 1 or radius < 0:
        raise ValueError("block must be >= 1 and radius >= 0")
    return FlowField(kernels.block_match(a, b, block, radius, _candidates(radius)))


class FlowBank:
    """Consecutive-frame flows plus a cache of composed multi-frame fields.

    ``fw[t]`` maps frame t to t+1 and ``bw[t]`` maps frame t+1 to t.
    """

    def __init__(self, fw: Sequence[FlowField | None], bw: Sequence[FlowField | None]):
        if len(fw) != len(bw):
            raise DimensionMismatch("forward and backward flow lists differ in length")
        self.fw = list(fw)
        self.bw = list(bw)
        self._cache: dict[tuple[int, int], FlowField] = {}

    @property
    def num_frames(self) -> int:
        return len(self.fw) + 1

    def chain(self, a: int, b: int) -> list[FlowField]:
        """Consecutive fields carrying frame ``a`` to frame ``b``."""
        if a < b:
            idx, src = range(a, b), self.fw
        else:
            idx, src = range(a - 1, b - 1, -1), self.bw
        out = []
        for t in idx:
            if not 0 <= t < len(src) or src[t] is None:
                raise MissingFlow(f"no {'forward' if a < b else 'backward'} flow at t={t} (frames {a}->{b})")
            out.append(src[t])
        return out

    def composed(self, a: int, b: int) -> FlowField:
        key = (a, b)
        hit = self._cache.get(key)
        if hit is None:
            hit = compose_flow(self.chain(a, b))
            self._cache[key] = hit
        return hit

    def prefetch_from(self, a: int, targets: Iterable[int]) -> None:
        """Compose ``a -> t`` for every target in one sweep per direction."""
        targets = sorted(set(targets) - {a})
        for side in ([t for t in targets if t > a], [t for t in reversed(targets) if t < a]):
            want = [t for t in side if (a, t) not in self._cache]
            if not want:
                continue
            far = want[-1]
            step = 1 if far > a else -1
            for t, field in zip(range(a + step, far + step, step), iter_compose(self.chain(a, far))):
                if t in want:
                    self._cache[(a, t)] = field

    @classmethod
    def zeros(cls, num_frames: int, height: int, width: int) -> "FlowBank":
        z = FlowField.zeros(height, width)
        return cls([z] * (num_frames - 1), [z] * (num_frames - 1))
