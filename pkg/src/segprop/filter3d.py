"""Space-time smoothing of the final votes.

Votes of the frames around k are pulled into k's pixel grid along the flow
trajectories, stacked, and smoothed with a normalized separable Gaussian in
(x, y, t). Samples whose trajectory left the image are masked out and the
kernel is renormalized over the taps that remain.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .core import LabelMap, VoteVolume, argmax_labels
from .errors import DimensionMismatch
from .flowio import FlowBank, warp_gather
from .propagate import PropagationState


@dataclass(frozen=True)
class FilterConfig:
    enabled: bool = False
    sigma_s: float = 0.7
    sigma_t: float = 1.0
    radius: int = 2


@dataclass(frozen=True)
class TrajectoryStack:
    """Votes of frames k+d (d in ``offsets``) resampled onto frame k."""

    planes: np.ndarray  # (T, C, H, W)
    valid: np.ndarray  # (T, H, W) bool
    offsets: tuple[int, ...]


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at 3 sigma and normalized; sigma=0 gives the identity."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    r = int(np.floor(3.0 * sigma))
    if sigma == 0 or r == 0:
        return np.ones(1)
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def build_stack(state: PropagationState, flows: FlowBank, k: int, radius: int = 2) -> TrajectoryStack:
    n = state.volumes.shape[0]
    planes, valid, offs = [], [], []
    for d in range(-radius, radius + 1):
        q = k + d
        if not 0 <= q < n:
            continue
        if d == 0:
            planes.append(state.volumes[k])
            valid.append(np.ones(state.volumes.shape[2:], dtype=bool))
        else:
            vol, ok = warp_gather(state.volume(q), flows.composed(k, q))
            planes.append(vol.data)
            valid.append(ok)
        offs.append(d)
    return TrajectoryStack(np.stack(planes), np.stack(valid), tuple(offs))


def gaussian_filter_3d(stack: TrajectoryStack, sigma_s: float, sigma_t: float) -> VoteVolume:
    """Smoothed votes for the stack's centre frame (offset 0)."""
    if stack.planes.shape[0] != len(stack.offsets) or stack.valid.shape != (
            stack.planes.shape[0],) + stack.planes.shape[2:]:
        raise DimensionMismatch("stack planes, masks and offsets disagree")
    gs = gaussian_kernel(sigma_s)
    if sigma_t == 0:
        tw = np.array([1.0 if d == 0 else 0.0 for d in stack.offsets])
    else:
        d = np.asarray(stack.offsets, dtype=np.float64)
        keep = np.abs(d) <= 3 * sigma_t
        tw = np.zeros(len(d))
        tw[keep] = np.exp(-0.5 * (d[keep] / sigma_t) ** 2)

    m = stack.valid.astype(np.float64)
    num = np.tensordot(tw, stack.planes * m[:, None], axes=1)  # (C, H, W)
    den = np.tensordot(tw, m, axes=1)  # (H, W)
    for ax in (-1, -2):
        num = correlate1d(num, gs, axis=ax, mode="constant", cval=0.0)
        den = correlate1d(den, gs, axis=ax, mode="constant", cval=0.0)
    out = np.zeros_like(num)
    ok = den > 0
    out[:, ok] = num[:, ok] / den[ok]
    return VoteVolume(out)


def filter_labels(state: PropagationState, flows: FlowBank, k: int, config: FilterConfig = FilterConfig()) -> LabelMap:
    """Filtered label map for frame k. Keyframes keep their labels."""
    if k in state.keyframes:
        return state.label_map(k)
    stack = build_stack(state, flows, k, config.radius)
    vol = gaussian_filter_3d(stack, config.sigma_s, config.sigma_t)
    return argmax_labels(vol)


def filter_sequence(state: PropagationState, flows: FlowBank, config: FilterConfig = FilterConfig()) -> list[LabelMap]:
    return [filter_labels(state, flows, k, config) for k in range(state.volumes.shape[0])]
