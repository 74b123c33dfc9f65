"""Structure-preserving votes: each same-class connected region of a labeled
frame is carried to the target frame by a homography fitted robustly
(least median of squares) to its flow correspondences."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import ndimage

from .core import LabelMap, VoteVolume
from .errors import DimensionMismatch, TooFewPoints
from .flowio import FlowBank, FlowField
from .propagate import VoteSource, decay, _flanking

log = logging.getLogger(__name__)

_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class Component:
    cls: int
    ys: np.ndarray
    xs: np.ndarray

    @property
    def size(self) -> int:
        return len(self.ys)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(x_min, y_min, x_max, y_max), inclusive."""
        return int(self.xs.min()), int(self.ys.min()), int(self.xs.max()), int(self.ys.max())


@dataclass(frozen=True)
class HomographyConfig:
    enabled: bool = False
    weight: float = 1.0
    samples: int = 500
    seed: int = 0
    reject_px2: float = 4.0
    min_points: int = 4
    max_points: int = 2000


def connected_components(labels: LabelMap) -> list[Component]:
    """Maximal 4-connected same-class regions, in scanline discovery order."""
    data = labels.data
    w = data.shape[1]
    found = []
    for c in np.unique(data):
        lab, n = ndimage.label(data == c, structure=_FOUR)
        if n == 0:
            continue
        flat = lab.reshape(-1)
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=n + 1)
        starts = np.cumsum(counts)[:-1]
        for i in range(1, n + 1):
            idx = order[starts[i - 1]:starts[i - 1] + counts[i]]
            found.append((int(idx[0]), Component(int(c), idx // w, idx % w)))
    found.sort(key=lambda t: t[0])
    return [comp for _, comp in found]


# ---------------------------------------------------------------------------
# DLT + LMedS

def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2).

    ``pts`` is (..., n, 2); returns (..., 3, 3).
    """
    c = pts.mean(axis=-2, keepdims=True)
    d = np.sqrt(((pts - c) ** 2).sum(axis=-1)).mean(axis=-1)
    s = np.sqrt(2.0) / np.where(d > 0, d, 1.0)
    t = np.zeros(pts.shape[:-2] + (3, 3))
    t[..., 0, 0] = s
    t[..., 1, 1] = s
    t[..., 0, 2] = -s * c[..., 0, 0]
    t[..., 1, 2] = -s * c[..., 0, 1]
    t[..., 2, 2] = 1.0
    return t


def _to_h(pts):
    return np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1)


def _project(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply (..., 3, 3) homographies to (..., n, 2) points."""
    q = _to_h(pts) @ np.swapaxes(h, -1, -2)
    with np.errstate(divide="ignore", invalid="ignore"):
        return q[..., :2] / q[..., 2:3]


def dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized direct linear transform; batched over leading axes."""
    ts, td = _normalizer(src), _normalizer(dst)
    s = _project(ts, src)
    d = _project(td, dst)
    x, y = s[..., 0], s[..., 1]
    u, v = d[..., 0], d[..., 1]
    z, o = np.zeros_like(x), np.ones_like(x)
    r1 = np.stack([-x, -y, -o, z, z, z, u * x, u * y, u], axis=-1)
    r2 = np.stack([z, z, z, -x, -y, -o, v * x, v * y, v], axis=-1)
    a = np.concatenate([r1, r2], axis=-2)
    # null vector of A; the reduced SVD suffices once A has >= 9 rows
    _, _, vt = np.linalg.svd(a, full_matrices=a.shape[-2] < 9)
    hn = vt[..., -1, :].reshape(a.shape[:-2] + (3, 3))
    h = np.linalg.inv(td) @ hn @ ts
    return normalize_h(h)


def normalize_h(h: np.ndarray) -> np.ndarray:
    br = h[..., 2:3, 2:3]
    return np.where(np.abs(br) > 1e-15, h / np.where(br == 0, 1, br), h)


def symmetric_transfer_error(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Squared forward plus backward reprojection error per correspondence."""
    try:
        hinv = np.linalg.inv(h)
    except np.linalg.LinAlgError:
        return np.full(src.shape[:-1], np.inf)
    fwd = ((_project(h, src) - dst) ** 2).sum(axis=-1)
    bwd = ((_project(hinv, dst) - src) ** 2).sum(axis=-1)
    err = fwd + bwd
    return np.where(np.isfinite(err), err, np.inf)


def _collinear(p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """True where any three of the four points in (..., 4, 2) are collinear."""
    bad = np.zeros(p.shape[:-2], dtype=bool)
    for a, b, c in itertools.combinations(range(4), 3):
        ab = p[..., b, :] - p[..., a, :]
        ac = p[..., c, :] - p[..., a, :]
        area = np.abs(ab[..., 0] * ac[..., 1] - ab[..., 1] * ac[..., 0])
        scale = np.maximum((ab ** 2).sum(-1), (ac ** 2).sum(-1))
        bad |= area <= tol * np.maximum(scale, 1e-300)
    return bad


def estimate_homography_lmeds(src_pts, dst_pts, iterations: int = 500, seed: int = 0,
                              reject_px2: float = 4.0) -> np.ndarray | None:
    """Least-median-of-squares homography from ``src_pts`` to ``dst_pts``.

    Returns the 3x3 matrix (bottom-right entry 1), or ``None`` when the fit is
    rejected: every sample degenerate, best median error above
    ``reject_px2``, or a singular result.
    """
    src = np.asarray(src_pts, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst_pts, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise DimensionMismatch("source and destination point counts differ")
    n = len(src)
    if n < 4:
        raise TooFewPoints(f"need >= 4 correspondences, got {n}")

    n_comb = _n_choose_4(n)
    if n_comb <= iterations:
        samples = np.array(list(itertools.combinations(range(n), 4)), dtype=np.int64)
    else:
        rng = np.random.default_rng(seed)
        samples = _sample_distinct(rng, n, iterations)
    ok = ~(_collinear(src[samples]) | _collinear(dst[samples]))
    samples = samples[ok]
    if len(samples) == 0:
        log.debug("lmeds: all samples degenerate")
        return None

    hs = dlt(src[samples], dst[samples])
    finite = np.isfinite(hs).all(axis=(1, 2)) & (np.abs(np.linalg.det(hs)) > 1e-12)
    hs = hs[finite]
    if len(hs) == 0:
        return None
    errs = _batched_errors(hs, src, dst)
    med = np.median(errs, axis=1)
    best = int(np.argmin(med))
    best_med = float(med[best])
    if not np.isfinite(best_med) or best_med > reject_px2:
        log.debug("lmeds: best median %.4g px^2 above threshold", best_med)
        return None

    h = hs[best]
    scale = 1.4826 * (1.0 + 5.0 / (n - 4)) * np.sqrt(best_med) if n > 4 else 0.0
    cut = max((2.5 * scale) ** 2, 1e-12)
    inl = errs[best] <= cut
    if inl.sum() >= 4:
        refit = dlt(src[inl], dst[inl])
        if np.isfinite(refit).all() and abs(np.linalg.det(refit)) > 1e-12:
            h = refit
    if abs(np.linalg.det(h)) <= 1e-12:
        return None
    return h


def _n_choose_4(n: int) -> int:
    return n * (n - 1) * (n - 2) * (n - 3) // 24


def _sample_distinct(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    out = rng.integers(0, n, size=(k, 4))
    for _ in range(16):
        s = np.sort(out, axis=1)
        dup = (np.diff(s, axis=1) == 0).any(axis=1)
        if not dup.any():
            break
        out[dup] = rng.integers(0, n, size=(int(dup.sum()), 4))
    s = np.sort(out, axis=1)
    return out[~(np.diff(s, axis=1) == 0).any(axis=1)]


def _apply_batch(hs: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map points (n,) through homographies (m, 3, 3); returns two (m, n) arrays."""
    def row(r):
        return hs[:, r, 0, None] * x + hs[:, r, 1, None] * y + hs[:, r, 2, None]
    d = row(2)
    return row(0) / d, row(1) / d


def _batched_errors(hs: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        hinv = np.linalg.inv(hs)
        fx, fy = _apply_batch(hs, src[:, 0], src[:, 1])
        bx, by = _apply_batch(hinv, dst[:, 0], dst[:, 1])
        err = (fx - dst[:, 0]) ** 2 + (fy - dst[:, 1]) ** 2 + (bx - src[:, 0]) ** 2 + (by - src[:, 1]) ** 2
    return np.where(np.isfinite(err), err, np.inf)


# ---------------------------------------------------------------------------
# votes

def _splat_points(px: np.ndarray, py: np.ndarray, h: int, w: int) -> np.ndarray:
    out = np.zeros(h * w)
    ok = np.isfinite(px) & np.isfinite(py)
    px, py = px[ok], py[ok]
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx, fy = px - x0, py - y0
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        cx, cy = x0 + dx, y0 + dy
        keep = (cx >= 0) & (cy >= 0) & (cx < w) & (cy < h) & (wt > 0)
        np.add.at(out, cy[keep] * w + cx[keep], wt[keep])
    return out.reshape(h, w)


def homography_votes(labels_src: LabelMap, flow_src_to_k: FlowField, k_dims: tuple[int, int] | None = None,
                     config: HomographyConfig = HomographyConfig(), mass: float = 1.0) -> VoteVolume:
    """Project every connected region of ``labels_src`` into frame k.

    Each region's homography is fitted to (pixel, pixel + flow) pairs over its
    valid flow trajectories. Regions with fewer than ``config.min_points``
    valid pairs or a rejected fit cast no votes. Where projected regions
    overlap, smaller regions occlude larger ones.
    """
    if labels_src.shape != flow_src_to_k.shape:
        raise DimensionMismatch(f"labels {labels_src.shape} vs flow {flow_src_to_k.shape}")
    h, w = k_dims if k_dims is not None else labels_src.shape
    valid = flow_src_to_k.valid_mask()
    disp = flow_src_to_k.data.astype(np.float64)
    comps = connected_components(labels_src)
    layers = []
    for ci, comp in enumerate(comps):
        keep = valid[comp.ys, comp.xs]
        if keep.sum() < config.min_points:
            continue
        ys, xs = comp.ys[keep], comp.xs[keep]
        src = np.stack([xs, ys], axis=1).astype(np.float64)
        dst = src + disp[ys, xs]
        if len(src) > config.max_points:
            pick = np.random.default_rng([config.seed, ci]).choice(len(src), config.max_points, replace=False)
            src, dst = src[np.sort(pick)], dst[np.sort(pick)]
        hmat = estimate_homography_lmeds(src, dst, config.samples, config.seed + ci, config.reject_px2)
        if hmat is None:
            continue
        pts = np.stack([comp.xs, comp.ys], axis=1).astype(np.float64)
        proj = _project(hmat, pts)
        layers.append((comp.size, ci, comp.cls, _splat_points(proj[:, 0], proj[:, 1], h, w)))

    out = np.zeros((labels_src.num_classes, h, w))
    # painter's order: largest first, so smaller regions end on top
    for _, _, cls, dep in sorted(layers, key=lambda t: (-t[0], t[1])):
        cover = np.minimum(dep, 1.0)
        out *= 1.0 - cover
        out[cls] += mass * dep
    return VoteVolume(out)


class HomographyVoter:
    """Homography votes for frame k from its two flanking keyframes, cached per frame."""

    def __init__(self, keyframe_labels: Mapping[int, LabelMap], flows: FlowBank,
                 config: HomographyConfig = HomographyConfig(), lam: float = 0.05, mass: float = 1.0):
        self.keyframe_labels = dict(keyframe_labels)
        self.keyframes = sorted(self.keyframe_labels)
        self.flows = flows
        self.config = config
        self.lam = lam
        self.mass = mass
        self._cache: dict[int, np.ndarray | None] = {}

    def votes(self, k: int) -> np.ndarray | None:
        if k in self._cache:
            return self._cache[k]
        total = None
        for q in _flanking(self.keyframes, k):
            if q is None:
                continue
            lab = self.keyframe_labels[q]
            vol = homography_votes(lab, self.flows.composed(q, k), lab.shape, self.config, self.mass).data
            s = vol.sum(axis=0)
            hit = s > 0
            vol[:, hit] *= decay(abs(k - q), self.lam) / s[hit]
            total = vol if total is None else total + vol
        self._cache[k] = total
        return total

    def as_vote_source(self, weight: float | None = None) -> VoteSource:
        w = self.config.weight if weight is None else weight
        return VoteSource("homography", w, lambda state, k: self.votes(k))


def as_vote_source(keyframe_labels: Mapping[int, LabelMap], flows: FlowBank, weight: float,
                   config: HomographyConfig = HomographyConfig(), lam: float = 0.05) -> VoteSource:
    return HomographyVoter(keyframe_labels, flows, config, lam).as_vote_source(weight)
