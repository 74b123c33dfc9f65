"""End-to-end propagation: initialization, voting passes, optional homography
source and space-time filtering, driven by a ``RunConfig``."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import RunConfig
from .core import LabelMap, SequenceSpec
from .errors import ConfigError
from .evalmetrics import mean_f1
from .filter3d import filter_sequence
from .flowio import FlowBank
from .homography import HomographyVoter
from .propagate import PropagationState, VoteSource, final_labels, init_state, run_to_convergence


@dataclass
class RunResult:
    spec: SequenceSpec
    state: PropagationState
    labels: list[LabelMap]
    passes: int
    history: list[float]
    timings: dict[str, float] = field(default_factory=dict)


def build_sources(config: RunConfig, keyframe_labels: Mapping[int, LabelMap], flows: FlowBank,
                  extra: Mapping[str, VoteSource] | None = None) -> list[VoteSource]:
    out = []
    if config.homography.enabled:
        voter = HomographyVoter(keyframe_labels, flows, config.homography, config.lam, config.total_vote_mass)
        out.append(voter.as_vote_source(config.source_weights.get("homography", config.homography.weight)))
    for name, src in (extra or {}).items():
        w = config.source_weights.get(name, src.weight)
        out.append(VoteSource(name, w, src.generator))
    return out


def run_propagation(config: RunConfig, keyframe_labels: Mapping[int, LabelMap], flows: FlowBank,
                    num_frames: int, num_classes: int, passes: int | None = None,
                    extra_sources: Mapping[str, VoteSource] | None = None,
                    on_iteration: Callable[[PropagationState], None] | None = None) -> RunResult:
    """Propagate keyframe labels to every frame.

    ``passes`` overrides ``config.max_iters`` (both count voting passes after
    initialization). ``on_iteration`` sees the initial state and each pass.
    """
    h, w = next(iter(keyframe_labels.values())).shape
    spec = config.sequence_spec(num_frames, w, h, num_classes, keyframe_labels.keys())
    timings: dict[str, float] = {}
    sources = build_sources(config, keyframe_labels, flows, extra_sources)

    t0 = time.perf_counter()
    if config.init == "source":
        if not sources:
            raise ConfigError("init=source needs an enabled vote source")
        state = init_state(spec, keyframe_labels, flows, mode="source", source=sources[0], threads=config.threads)
    else:
        state = init_state(spec, keyframe_labels, flows, mode=config.init, threads=config.threads,
                           sources=sources if config.init == "pairwise" else ())
    timings["init"] = time.perf_counter() - t0
    if on_iteration is not None:
        on_iteration(state)

    t0 = time.perf_counter()
    n_pass = config.max_iters if passes is None else passes
    state, used, history = run_to_convergence(
        state, spec, flows, sources, config.threads, config.flow_votes, config.anchor_votes,
        max_iters=n_pass, epsilon=config.epsilon, on_iteration=on_iteration)
    timings["iterate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    labels = filter_sequence(state, flows, config.filter) if config.filter.enabled else final_labels(state)
    timings["filter"] = time.perf_counter() - t0
    return RunResult(spec, state, labels, used, history, timings)


def eval_frames(num_frames: int, keyframes: Sequence[int]) -> list[int]:
    kf = set(keyframes)
    return [k for k in range(num_frames) if k not in kf]


def score(labels: Sequence[LabelMap | np.ndarray], gt: Sequence[LabelMap], frames: Sequence[int],
          num_classes: int) -> float:
    return mean_f1([labels[k] for k in frames], [gt[k] for k in frames], num_classes)
