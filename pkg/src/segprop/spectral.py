"""Explicit space-time graph view of the voting passes.

Builds the sparse matrix M linking (frame, class, pixel) nodes through the
same gather/splat links a voting pass uses, then runs the clamped,
row-normalized power iteration p <- D^-1 M p. The construction is
independent of the warp kernels: trajectories, bilinear coefficients and
splat normalizers are recomputed here from the pixel conventions, so agreement
with ``segprop_iterate`` is a genuine cross-check.

Node ``(t, c, y, x)`` maps to row ``((t * C + c) * H + y) * W + x``, which is
the flattening order of a ``(N, C, H, W)`` volume stack.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import sparse

from .core import LabelMap, SequenceSpec
from .errors import DimensionMismatch, InstanceTooLarge
from .flowio import FlowBank

MAX_NONZEROS = 10_000_000


@dataclass
class SpaceTimeGraph:
    shape: tuple[int, int, int, int]  # (N, C, H, W)
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray  # e^{-lam d} times bilinear / splat-normalized coefficient
    degree: np.ndarray  # per node normalizer D (length N*H*W, shared by classes)
    clamped: np.ndarray  # bool per node
    lam: float
    links: dict[int, list[int]] = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def nnz(self) -> int:
        return len(self.vals)

    def node_index(self, t: int, c: int, y: int, x: int) -> int:
        n, nc, h, w = self.shape
        return ((t * nc + c) * h + y) * w + x

    def matrix(self) -> sparse.csr_matrix:
        m = self.num_nodes
        return sparse.csr_matrix((self.vals, (self.rows, self.cols)), shape=(m, m))

    def node_degree(self) -> np.ndarray:
        n, c, h, w = self.shape
        return np.broadcast_to(self.degree.reshape(n, 1, h, w), self.shape).reshape(-1)


# ---------------------------------------------------------------------------
# trajectories and coefficients

def _inside(x, y, w, h):
    return (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)


def _sample_coeffs(x, y, w, h):
    """Four (flat index, coefficient) pairs of the bilinear sample at (x, y).

    The base index is clamped to n-2 so the far neighbour exists; for a
    one-pixel axis the base is 0 with weight 0 on the (repeated) far tap.
    """
    def axis(p, n):
        if n == 1:
            b = np.zeros(p.shape, dtype=np.int64)
            return b, b, np.zeros(p.shape)
        b = np.clip(np.floor(p), 0, n - 2).astype(np.int64)
        return b, b + 1, p - b

    x0, x1, fx = axis(x, w)
    y0, y1, fy = axis(y, h)
    return [
        (y0 * w + x0, (1 - fy) * (1 - fx)),
        (y0 * w + x1, (1 - fy) * fx),
        (y1 * w + x0, fy * (1 - fx)),
        (y1 * w + x1, fy * fx),
    ]


def _interp(plane, x, y):
    h, w = plane.shape
    out = np.zeros(x.shape)
    for idx, cf in _sample_coeffs(x, y, w, h):
        out = out + cf * plane.reshape(-1)[idx]
    return out


def trace(fields: Sequence[np.ndarray], h: int, w: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """End positions and validity of trajectories started at every pixel.

    A trajectory is checked against the image bounds before each step and
    once more at the end; invalid trajectories stop moving.
    """
    y, x = np.mgrid[0:h, 0:w]
    x = x.astype(np.float64).reshape(-1)
    y = y.astype(np.float64).reshape(-1)
    ok = np.ones(h * w, dtype=bool)
    for f in fields:
        f = np.asarray(f, dtype=np.float64)
        ok &= _inside(x, y, w, h)
        u = _interp(f[..., 0], x[ok], y[ok])
        v = _interp(f[..., 1], x[ok], y[ok])
        x[ok] = x[ok] + u
        y[ok] = y[ok] + v
    ok &= _inside(x, y, w, h)
    # round-trip through the displacement so positions match a stored flow field
    gy, gx = np.mgrid[0:h, 0:w]
    gx = gx.reshape(-1).astype(np.float64)
    gy = gy.reshape(-1).astype(np.float64)
    return gx + (x - gx), gy + (y - gy), ok


def _chain(flows: FlowBank, a: int, b: int) -> list[np.ndarray]:
    return [f.data for f in flows.chain(a, b)]


def frame_links(spec: SequenceSpec, k: int, anchors: bool = True) -> list[int]:
    """Frames linked to frame k: in-range neighbour offsets, then the flanking
    keyframes when they are not already among them."""
    out = [k + o for o in spec.neighbor_offsets if 0 <= k + o < spec.num_frames]
    if anchors:
        before = [q for q in spec.keyframes if q < k]
        after = [q for q in spec.keyframes if q > k]
        for q in (before[-1] if before else None, after[0] if after else None):
            if q is not None and q not in out:
                out.append(q)
    return out


# ---------------------------------------------------------------------------
# graph assembly

def build_graph(spec: SequenceSpec, flows: FlowBank, keyframe_labels: Mapping[int, LabelMap] | None = None,
                lam: float | None = None, clamped: bool = True, anchors: bool = True) -> SpaceTimeGraph:
    """Materialize M for the whole sequence.

    With ``clamped`` the keyframe rows are identity rows (their votes never
    change); otherwise every frame gets voting rows.
    """
    n, c, h, w = spec.num_frames, spec.num_classes, spec.height, spec.width
    lam = spec.lam if lam is None else lam
    if flows.num_frames != n:
        raise DimensionMismatch(f"flows cover {flows.num_frames} frames, sequence has {n}")
    if keyframe_labels is not None:
        for k, lab in keyframe_labels.items():
            if lab.shape != (h, w):
                raise DimensionMismatch(f"keyframe {k} labels {lab.shape} vs {(h, w)}")
    num_nodes = n * c * h * w
    if num_nodes > MAX_NONZEROS:
        raise InstanceTooLarge(f"{num_nodes} nodes exceed the {MAX_NONZEROS} limit")
    hw = h * w
    kf = set(spec.keyframes) if clamped else set()

    # per frame entries over pixels: (target pixel, source frame, source pixel, value)
    tgt, src_f, src_p, val = [], [], [], []
    tgt_f = []
    degree = np.zeros((n, hw))
    links: dict[int, list[int]] = {}
    budget = 0
    pix = np.arange(hw)
    for k in range(n):
        if k in kf:
            degree[k] = 1.0
            tgt_f.append(np.full(hw, k)); tgt.append(pix); src_f.append(np.full(hw, k))
            src_p.append(pix); val.append(np.ones(hw))
            continue
        mark = len(val)
        ln = frame_links(spec, k, anchors and clamped)
        links[k] = ln
        degree[k] += 1.0
        tgt_f.append(np.full(hw, k)); tgt.append(pix); src_f.append(np.full(hw, k))
        src_p.append(pix); val.append(np.ones(hw))
        for q in ln:
            wq = math.exp(-lam * abs(q - k))
            # gather: pixel p of k reads frame q at the end of its k -> q trajectory
            x, y, ok = trace(_chain(flows, k, q), h, w)
            idx = np.nonzero(ok)[0]
            for corner, cf in _sample_coeffs(x[idx], y[idx], w, h):
                tgt_f.append(np.full(len(idx), k)); tgt.append(idx); src_f.append(np.full(len(idx), q))
                src_p.append(corner); val.append(wq * cf)
            degree[k, idx] += wq
            # splat: pixel s of q deposits at the end of its q -> k trajectory
            x, y, ok = trace(_chain(flows, q, k), h, w)
            s = np.nonzero(ok)[0]
            xs, ys = x[s], y[s]
            x0, y0 = np.floor(xs).astype(np.int64), np.floor(ys).astype(np.int64)
            fx, fy = xs - x0, ys - y0
            dep_t, dep_s, dep_c = [], [], []
            for dx, dy, cf in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                               (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
                cx, cy = x0 + dx, y0 + dy
                keep = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h) & (cf != 0)
                dep_t.append(cy[keep] * w + cx[keep]); dep_s.append(s[keep]); dep_c.append(cf[keep])
            dep_t = np.concatenate(dep_t); dep_s = np.concatenate(dep_s); dep_c = np.concatenate(dep_c)
            mass = np.bincount(dep_t, weights=dep_c, minlength=hw)
            tgt_f.append(np.full(len(dep_t), k)); tgt.append(dep_t); src_f.append(np.full(len(dep_t), q))
            src_p.append(dep_s); val.append(wq * dep_c / mass[dep_t])
            degree[k, mass > 0] += wq
        budget += c * sum(len(v) for v in val[mark:])
        if budget > MAX_NONZEROS:
            raise InstanceTooLarge(f"graph exceeds {MAX_NONZEROS} nonzeros")

    tf = np.concatenate(tgt_f); tp = np.concatenate(tgt)
    sf = np.concatenate(src_f); sp = np.concatenate(src_p); v = np.concatenate(val)
    rows, cols, vals = [], [], []
    for cl in range(c):
        rows.append((tf * c + cl) * hw + tp)
        cols.append((sf * c + cl) * hw + sp)
        vals.append(v)
    rows = np.concatenate(rows); cols = np.concatenate(cols); vals = np.concatenate(vals)
    rows, cols, vals = _coalesce(rows, cols, vals, num_nodes)
    if len(vals) > MAX_NONZEROS:
        raise InstanceTooLarge(f"graph has {len(vals)} nonzeros")
    clamp = np.zeros((n, c, hw), dtype=bool)
    for k in kf:
        clamp[k] = True
    return SpaceTimeGraph((n, c, h, w), rows, cols, vals, degree.reshape(-1), clamp.reshape(-1), lam, links)


def _coalesce(rows, cols, vals, m):
    key = rows.astype(np.int64) * m + cols
    order = np.argsort(key, kind="stable")
    key, vals = key[order], vals[order]
    uniq, start = np.unique(key, return_index=True)
    summed = np.add.reduceat(vals, start) if len(vals) else vals
    nz = summed != 0
    return uniq[nz] // m, uniq[nz] % m, summed[nz]


# ---------------------------------------------------------------------------
# iteration and scores

def _check_vec(graph: SpaceTimeGraph, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.size != graph.num_nodes:
        raise DimensionMismatch(f"vector has {p.size} entries, graph has {graph.num_nodes} nodes")
    return p


def power_step(graph: SpaceTimeGraph, p: np.ndarray, mat: sparse.csr_matrix | None = None) -> np.ndarray:
    p = _check_vec(graph, p)
    mat = graph.matrix() if mat is None else mat
    out = (mat @ p) / graph.node_degree()
    out[graph.clamped] = p[graph.clamped]
    return out


def power_iterate(graph: SpaceTimeGraph, p0: np.ndarray, iters: int, history: bool = False):
    """``iters`` clamped, row-normalized steps from ``p0``.

    Returns the final vector, or the list of all iterates (p0 first) when
    ``history`` is set.
    """
    p = _check_vec(graph, p0).copy()
    if (p < 0).any():
        raise ValueError("p0 must be non-negative")
    mat = graph.matrix()
    seq = [p]
    for _ in range(iters):
        p = power_step(graph, p, mat)
        seq.append(p)
    return seq if history else p


def symmetric_matrix(graph: SpaceTimeGraph) -> sparse.csr_matrix:
    """Undirected version of the link weights, (M + M^T) / 2."""
    m = graph.matrix()
    return ((m + m.T) * 0.5).tocsr()


def power_iterate_l2(mat: sparse.csr_matrix, p0: np.ndarray, iters: int) -> list[np.ndarray]:
    """Plain power iteration with L2 normalization (no clamping)."""
    p = np.asarray(p0, dtype=np.float64).reshape(-1)
    p = p / np.linalg.norm(p)
    seq = [p]
    for _ in range(iters):
        p = mat @ p
        p = p / np.linalg.norm(p)
        seq.append(p)
    return seq


def segmentation_score(graph: SpaceTimeGraph | sparse.spmatrix, p: np.ndarray) -> float:
    """p^T M p."""
    mat = graph.matrix() if isinstance(graph, SpaceTimeGraph) else graph
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.size != mat.shape[0]:
        raise DimensionMismatch(f"vector has {p.size} entries, matrix is {mat.shape}")
    return float(p @ (mat @ p))


def rayleigh_quotient(mat, p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    return float(p @ (mat @ p)) / float(p @ p)


# ---------------------------------------------------------------------------
# equivalence report

@dataclass
class EquivalenceReport:
    deviations: list[float]
    agreement: list[float]
    scores: list[float]
    nodes: int
    nonzeros: int
    tolerance: float = 1e-9

    @property
    def max_deviation(self) -> float:
        return max(self.deviations, default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_deviation <= self.tolerance

    def to_text(self) -> str:
        lines = [f"nodes: {self.nodes}", f"nonzeros: {self.nonzeros}",
                 "iter  max_abs_dev  agreement  score"]
        for i, (d, a, s) in enumerate(zip(self.deviations, self.agreement, self.scores), start=1):
            lines.append(f"{i:4d}  {d:.3e}  {a:.6f}  {s:.9g}")
        lines.append(f"max deviation {self.max_deviation:.3e} (tolerance {self.tolerance:g}): "
                     f"{'PASS' if self.ok else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        kv = {"nodes": self.nodes, "nonzeros": self.nonzeros, "iterations": len(self.deviations),
              "max_deviation": repr(self.max_deviation), "tolerance": repr(self.tolerance),
              "status": "pass" if self.ok else "fail"}
        for i, (d, a, s) in enumerate(zip(self.deviations, self.agreement, self.scores), start=1):
            kv[f"iter.{i}.deviation"] = repr(d)
            kv[f"iter.{i}.agreement"] = repr(a)
            kv[f"iter.{i}.score"] = repr(s)
        return "".join(f"{k}={v}\n" for k, v in kv.items())

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "equivalence.txt").write_text(self.to_text())
        (out / "equivalence.kv").write_text(self.to_kv())


def verify_equivalence(spec: SequenceSpec, flows: FlowBank, keyframe_labels: Mapping[int, LabelMap],
                       iters: int = 7, inject_fault: str | None = None, init: str = "pairwise",
                       tolerance: float = 1e-9, threads: int = 1) -> EquivalenceReport:
    """Run ``segprop_iterate`` and the explicit power iteration side by side
    from the same starting volumes and record how far they drift apart.

    ``inject_fault="lambda"`` builds the graph with a perturbed decay rate, a
    negative control that must show a deviation.
    """
    from .propagate import init_state, segprop_iterate

    lam = spec.lam
    if inject_fault is not None:
        if inject_fault != "lambda":
            raise ValueError(f"unknown fault {inject_fault!r}")
        lam = spec.lam * 2.0 + 0.1
    graph = build_graph(spec, flows, keyframe_labels, lam=lam)
    state = init_state(spec, keyframe_labels, flows, mode=init)
    mat = graph.matrix()
    p = state.volumes.reshape(-1).copy()
    devs, agree, scores = [], [], []
    for _ in range(iters):
        state = segprop_iterate(state, spec, flows, threads=threads)
        p = power_step(graph, p, mat)
        q = state.volumes.reshape(-1)
        devs.append(float(np.abs(q - p).max()))
        pa = p.reshape(state.volumes.shape).argmax(axis=1)
        agree.append(float((pa == state.labels).mean()))
        scores.append(segmentation_score(mat, q))
    return EquivalenceReport(devs, agree, scores, graph.num_nodes, graph.nnz, tolerance)
