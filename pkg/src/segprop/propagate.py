"""Iterative flow-based label propagation.

Every unlabeled frame keeps a soft vote volume. Initialization casts four
votes per pixel from the two flanking keyframes (two gathers along the
outward flow, two splats along the inward flow). Each later pass re-votes
every unlabeled frame from its temporal neighbours' previous volumes plus its
own, with weights decaying exponentially in frame distance. Keyframes are
clamped and never accumulate votes.

Updates are synchronous: a pass reads only the previous pass's volumes, so the
result is independent of frame order and worker count.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import LabelMap, SequenceSpec, VoteVolume, argmax_labels, one_hot
from .errors import BadOrdering, DimensionMismatch, EmptyInput, NotInitialized, TooFewKeyframes
from .flowio import FlowBank, FlowField, warp_gather, warp_splat

INIT_MODES = ("pairwise", "uniform", "source")


@dataclass
class VoteSource:
    """Extra per-frame votes folded into every pass.

    ``generator(state, k)`` returns a volume for frame ``k`` (or ``None`` for
    no opinion). Volumes are L1-normalized per pixel before weighting.
    """

    name: str
    weight: float
    generator: Callable[["PropagationState", int], VoteVolume | np.ndarray | None]

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError(f"vote source {self.name!r}: weight must be >= 0")

    def __call__(self, state: "PropagationState", k: int) -> np.ndarray | None:
        out = self.generator(state, k)
        if out is None:
            return None
        return out.data if isinstance(out, VoteVolume) else np.asarray(out, dtype=np.float64)


@dataclass
class PropagationState:
    volumes: np.ndarray  # (num_frames, C, H, W)
    keyframes: frozenset[int]
    iteration: int = 0
    one_sided: frozenset[int] = frozenset()
    labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.volumes.ndim != 4:
            raise DimensionMismatch("state volumes must be (N, C, H, W)")
        self.labels = np.argmax(self.volumes, axis=1).astype(np.uint8)

    @property
    def num_frames(self) -> int:
        return self.volumes.shape[0]

    @property
    def num_classes(self) -> int:
        return self.volumes.shape[1]

    def volume(self, k: int) -> VoteVolume:
        return VoteVolume(self.volumes[k])

    def label_map(self, k: int) -> LabelMap:
        return LabelMap(self.labels[k], self.num_classes)

    def unlabeled(self) -> list[int]:
        return [k for k in range(self.num_frames) if k not in self.keyframes]


def vote_weights(dists: Sequence[float], lam: float) -> np.ndarray:
    """Exponential-decay vote weights normalized to sum to 1."""
    d = np.asarray(dists, dtype=np.float64)
    if d.size == 0:
        raise EmptyInput("no distances given")
    if (d < 0).any():
        raise ValueError("distances must be >= 0")
    # shift by the minimum distance so large distances cannot underflow to 0/0
    w = np.exp(-lam * (d - d.min()))
    return w / w.sum()


def decay(dist: float, lam: float) -> float:
    return math.exp(-lam * dist)


class _Pool:
    """Accumulates weighted, per-pixel normalized votes for one frame."""

    def __init__(self, shape: tuple[int, int, int]):
        self.num = np.zeros(shape)
        self.den = np.zeros(shape[1:])

    def add_gather(self, vol: np.ndarray, flow: FlowField, w: float) -> None:
        g, ok = warp_gather(VoteVolume(vol), flow)
        self.num += w * g.data
        self.den += w * ok

    def add_splat(self, vol: np.ndarray, flow: FlowField, w: float) -> None:
        s, wt = warp_splat(VoteVolume(vol), flow)
        hit = wt > 0
        if hit.any():
            self.num[:, hit] += w * (s.data[:, hit] / wt[hit])
            self.den += w * hit

    def add(self, vol: np.ndarray, w: float) -> None:
        self.num += w * vol
        self.den += w

    def result(self, fallback: np.ndarray) -> np.ndarray:
        out = fallback.copy()
        hit = self.den > 0
        out[:, hit] = self.num[:, hit] / self.den[hit]
        return out


def _normalize_source(vol: np.ndarray, mass: float) -> tuple[np.ndarray, np.ndarray]:
    s = vol.sum(axis=0)
    present = s > 0
    out = np.zeros_like(vol)
    out[:, present] = vol[:, present] * (mass / s[present])
    return out, present


def _fold_sources(base: np.ndarray, state: PropagationState, k: int,
                  sources: Sequence[VoteSource], mass: float) -> np.ndarray:
    # flow votes enter with total weight 1; each source adds its own weight
    live = [s for s in sources if s.weight > 0]
    if not live:
        return base
    num = base.copy()
    den = np.ones(base.shape[1:])
    for src in live:
        vol = src(state, k)
        if vol is None:
            continue
        if vol.shape != base.shape:
            raise DimensionMismatch(f"vote source {src.name!r} returned {vol.shape}, expected {base.shape}")
        norm, present = _normalize_source(vol, mass)
        num += src.weight * norm
        den += src.weight * present
    return num / den


def uniform_volume(num_classes: int, shape: tuple[int, int], mass: float) -> np.ndarray:
    return np.full((num_classes,) + tuple(shape), mass / num_classes)


def _map(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _flanking(keyframes: Sequence[int], k: int) -> tuple[int | None, int | None]:
    before = [q for q in keyframes if q < k]
    after = [q for q in keyframes if q > k]
    return (before[-1] if before else None), (after[0] if after else None)


def _pair_votes(k: int, anchors: Sequence[tuple[int, np.ndarray, FlowField, FlowField]],
                lam: float, fallback: np.ndarray) -> np.ndarray:
    """Gather and splat votes for frame ``k`` from labeled anchor frames.

    Each anchor is ``(frame, volume, flow k->frame, flow frame->k)``.
    """
    pool = _Pool(fallback.shape)
    for q, vol, out_flow, in_flow in anchors:
        w = decay(abs(k - q), lam)
        pool.add_gather(vol, out_flow, w)
        pool.add_splat(vol, in_flow, w)
    return pool.result(fallback)


def propagate_pair(label_i: LabelMap, label_j: LabelMap, forward: Sequence[FlowField],
                   backward: Sequence[FlowField], k: int, lam: float = 0.05,
                   mass: float = 1.0) -> VoteVolume:
    """Votes for the frame ``k`` steps after ``label_i`` from both flanking labels.

    ``forward[t]`` maps frame ``t`` to ``t + 1`` and ``backward[t]`` maps
    ``t + 1`` to ``t``, with frame 0 being ``label_i`` and frame
    ``len(forward)`` being ``label_j``.
    """
    j = len(forward)
    if len(backward) != j:
        raise DimensionMismatch("forward and backward chains differ in length")
    if not 0 < k < j:
        raise BadOrdering(f"k={k} must lie strictly between 0 and {j}")
    if label_i.shape != label_j.shape or label_i.num_classes != label_j.num_classes:
        raise DimensionMismatch("flanking label maps differ")
    bank = FlowBank(forward, backward)
    anchors = [
        (0, one_hot(label_i, mass).data, bank.composed(k, 0), bank.composed(0, k)),
        (j, one_hot(label_j, mass).data, bank.composed(k, j), bank.composed(j, k)),
    ]
    fallback = uniform_volume(label_i.num_classes, label_i.shape, mass)
    return VoteVolume(_pair_votes(k, anchors, lam, fallback))


def init_state(spec: SequenceSpec, keyframe_labels: Mapping[int, LabelMap], flows: FlowBank | None,
               mode: str = "pairwise", source: VoteSource | None = None, threads: int = 1,
               sources: Sequence[VoteSource] = ()) -> PropagationState:
    """Build the iteration-0 state.

    ``mode`` selects how unlabeled frames start: ``"pairwise"`` (votes from
    the flanking keyframes), ``"uniform"`` (equal mass per class) or
    ``"source"`` (the given vote source's volumes).
    """
    if mode not in INIT_MODES:
        raise ValueError(f"unknown init mode {mode!r}; expected one of {INIT_MODES}")
    keyframes = sorted(spec.keyframes)
    if len(keyframes) < 2:
        raise TooFewKeyframes(f"need at least 2 keyframes, got {len(keyframes)}")
    missing = [k for k in keyframes if k not in keyframe_labels]
    if missing:
        raise TooFewKeyframes(f"no labels for keyframes {missing}")
    n, c, m = spec.num_frames, spec.num_classes, spec.total_vote_mass
    shape = spec.frame_shape
    for k in keyframes:
        lab = keyframe_labels[k]
        if lab.shape != shape or lab.num_classes != c:
            raise DimensionMismatch(f"keyframe {k}: labels {lab.shape}/{lab.num_classes} vs sequence {shape}/{c}")
    if flows is not None and flows.num_frames != n:
        raise DimensionMismatch(f"flows cover {flows.num_frames} frames, sequence has {n}")

    volumes = np.empty((n, c) + shape)
    for k in keyframes:
        volumes[k] = one_hot(keyframe_labels[k], m).data
    one_sided = frozenset(k for k in range(n) if k < keyframes[0] or k > keyframes[-1])
    kfset = set(keyframes)
    unlabeled = [k for k in range(n) if k not in kfset]
    uniform = uniform_volume(c, shape, m)

    if mode == "uniform":
        for k in unlabeled:
            volumes[k] = uniform
    elif mode == "source":
        if source is None:
            raise ValueError("init mode 'source' needs a vote source")
        probe = PropagationState(volumes.copy(), frozenset(keyframes), 0, one_sided)
        for k in unlabeled:
            vol = source(probe, k)
            if vol is None:
                volumes[k] = uniform
                continue
            norm, present = _normalize_source(vol, m)
            norm[:, ~present] = uniform[:, ~present]
            volumes[k] = norm
    else:
        if flows is None:
            raise ValueError("pairwise initialization needs flows")
        _init_pairwise(volumes, keyframes, unlabeled, flows, spec.lam, uniform, threads)
        if sources:
            probe = PropagationState(volumes.copy(), frozenset(keyframes), 0, one_sided)
            for k in unlabeled:
                volumes[k] = _fold_sources(volumes[k], probe, k, sources, m)

    return PropagationState(volumes, frozenset(keyframes), 0, one_sided)


def _init_pairwise(volumes, keyframes, unlabeled, flows: FlowBank, lam, uniform, threads):
    # inward flows come from one composition sweep per keyframe and side; all
    # composed fields land in the bank's cache, where the passes reuse them
    todo = set(unlabeled)
    for idx, q in enumerate(keyframes):
        lo = keyframes[idx - 1] if idx > 0 else -1
        hi = keyframes[idx + 1] if idx + 1 < len(keyframes) else volumes.shape[0]
        flows.prefetch_from(q, [t for t in range(lo + 1, hi) if t in todo])
    pairs = {k: [q for q in _flanking(keyframes, k) if q is not None] for k in unlabeled}
    for k in unlabeled:
        for q in pairs[k]:
            flows.composed(k, q)

    def one(k):
        anchors = [(q, volumes[q], flows.composed(k, q), flows.composed(q, k)) for q in pairs[k]]
        return _pair_votes(k, anchors, lam, uniform)

    for k, vol in zip(unlabeled, _map(one, unlabeled, threads)):
        volumes[k] = vol


def _vote_links(k: int, spec: SequenceSpec, keyframes: Sequence[int], anchors: bool) -> list[int]:
    """Frames that vote for frame ``k`` in a pass (besides ``k`` itself)."""
    n = spec.num_frames
    links = [k + o for o in spec.neighbor_offsets if 0 <= k + o < n]
    if anchors:
        for q in _flanking(keyframes, k):
            if q is not None and q not in links:
                links.append(q)
    return links


def _frame_update(k: int, prev: np.ndarray, spec: SequenceSpec, flows: FlowBank | None,
                  links: Sequence[int]) -> np.ndarray:
    pool = _Pool(prev.shape[1:])
    pool.add(prev[k], 1.0)  # self vote, distance 0
    for q in links:
        w = decay(abs(q - k), spec.lam)
        pool.add_gather(prev[q], flows.composed(k, q), w)
        pool.add_splat(prev[q], flows.composed(q, k), w)
    return pool.result(prev[k])


def segprop_iterate(state: PropagationState | None, spec: SequenceSpec, flows: FlowBank | None,
                    sources: Sequence[VoteSource] = (), threads: int = 1,
                    flow_votes: bool = True, anchor_votes: bool = True) -> PropagationState:
    """One synchronous voting pass over every unlabeled frame.

    Each unlabeled frame pools its own previous volume, gather and splat votes
    from the frames at ``spec.neighbor_offsets`` and, with ``anchor_votes``,
    from its flanking keyframes, then folds in the extra ``sources``.
    """
    if state is None or state.volumes.size == 0:
        raise NotInitialized("segprop_iterate needs an initialized state")
    if flow_votes and flows is None:
        raise ValueError("flow voting needs flows")
    prev = state.volumes
    frames = state.unlabeled()
    keyframes = sorted(state.keyframes)
    links = {k: (_vote_links(k, spec, keyframes, anchor_votes) if flow_votes else []) for k in frames}
    # composition fills the shared cache; do it before fanning out to workers
    for k in frames:
        for q in links[k]:
            flows.composed(k, q)
            flows.composed(q, k)
    m = spec.total_vote_mass

    def one(k):
        vol = _frame_update(k, prev, spec, flows, links[k])
        return _fold_sources(vol, state, k, sources, m)

    new = prev.copy()
    for k, vol in zip(frames, _map(one, frames, threads)):
        new[k] = vol
    return PropagationState(new, state.keyframes, state.iteration + 1, state.one_sided)


def changed_fraction(a: PropagationState, b: PropagationState) -> float:
    frames = a.unlabeled()
    if not frames:
        return 0.0
    return float((a.labels[frames] != b.labels[frames]).mean())


def run_to_convergence(state: PropagationState, spec: SequenceSpec, flows: FlowBank | None,
                       sources: Sequence[VoteSource] = (), threads: int = 1, flow_votes: bool = True,
                       anchor_votes: bool = True, max_iters: int | None = None, epsilon: float | None = None,
                       on_iteration: Callable[[PropagationState], None] | None = None,
                       ) -> tuple[PropagationState, int, list[float]]:
    """Iterate until the changed-argmax fraction drops below ``epsilon``.

    Returns the final state, the number of passes run and the per-pass
    changed-pixel fractions.
    """
    if state is None:
        raise NotInitialized("run_to_convergence needs an initialized state")
    max_iters = spec.max_iters if max_iters is None else max_iters
    epsilon = spec.epsilon if epsilon is None else epsilon
    history: list[float] = []
    for _ in range(max_iters):
        nxt = segprop_iterate(state, spec, flows, sources, threads, flow_votes, anchor_votes)
        frac = changed_fraction(state, nxt)
        history.append(frac)
        state = nxt
        if on_iteration is not None:
            on_iteration(state)
        if frac < epsilon:
            break
    return state, len(history), history


def final_labels(state: PropagationState) -> list[LabelMap]:
    return [argmax_labels(state.volumes[k]) for k in range(state.num_frames)]


def per_pixel_mass_error(state: PropagationState, mass: float) -> float:
    frames = state.unlabeled()
    if not frames:
        return 0.0
    return float(np.abs(state.volumes[frames].sum(axis=1) - mass).max())
