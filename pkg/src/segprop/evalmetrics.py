"""Segmentation scores (per-class F1 / IoU and their means) and the
temporal-gap degradation study."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import IGNORE_INDEX, LabelMap
from .errors import DimensionMismatch, SequenceTooShort

DEFAULT_GAPS = (25, 50, 75, 100, 125, 150)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts indexed ``[ground_truth, predicted]``."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise DimensionMismatch("confusion matrices differ in class count")
        return ConfusionMatrix(self.counts + other.counts)

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))


def confusion(pred: LabelMap | np.ndarray, gt: LabelMap | np.ndarray, num_classes: int | None = None,
              ignore_index: int | None = None) -> ConfusionMatrix:
    p = pred.data if isinstance(pred, LabelMap) else np.asarray(pred)
    g = gt.data if isinstance(gt, LabelMap) else np.asarray(gt)
    if p.shape != g.shape:
        raise DimensionMismatch(f"prediction {p.shape} vs ground truth {g.shape}")
    if num_classes is None:
        if isinstance(pred, LabelMap) and isinstance(gt, LabelMap) and pred.num_classes != gt.num_classes:
            raise DimensionMismatch("prediction and ground truth class counts differ")
        num_classes = gt.num_classes if isinstance(gt, LabelMap) else int(max(p.max(initial=0), g.max(initial=0))) + 1
    p = p.reshape(-1).astype(np.int64)
    g = g.reshape(-1).astype(np.int64)
    if ignore_index is not None:
        keep = g != ignore_index
        p, g = p[keep], g[keep]
    counts = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


@dataclass(frozen=True)
class ClassScores:
    f1: np.ndarray  # NaN for classes absent from both maps
    iou: np.ndarray
    present: np.ndarray
    mf1: float
    miou: float


def class_scores(cm: ConfusionMatrix) -> ClassScores:
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    present = (tp + fp + fn) > 0
    f1 = np.full(len(tp), np.nan)
    iou = np.full(len(tp), np.nan)
    f1[present] = 2 * tp[present] / (2 * tp[present] + fp[present] + fn[present])
    iou[present] = tp[present] / (tp[present] + fp[present] + fn[present])
    if present.any():
        mf1, miou = float(f1[present].mean()), float(iou[present].mean())
    else:
        mf1 = miou = float("nan")
    return ClassScores(f1, iou, present, mf1, miou)


def sequence_confusion(preds: Iterable[LabelMap | np.ndarray], gts: Iterable[LabelMap | np.ndarray],
                       num_classes: int) -> ConfusionMatrix:
    total = ConfusionMatrix.empty(num_classes)
    for p, g in zip(preds, gts, strict=True):
        total = total + confusion(p, g, num_classes)
    return total


def mean_f1(preds, gts, num_classes: int) -> float:
    return class_scores(sequence_confusion(preds, gts, num_classes)).mf1


def format_scores(scores: ClassScores, names: Sequence[str] | None = None) -> str:
    lines = [f"mF1={scores.mf1:.6f}", f"mIoU={scores.miou:.6f}"]
    for i, (f, u) in enumerate(zip(scores.f1, scores.iou)):
        name = names[i] if names is not None and i < len(names) else f"class{i}"
        if scores.present[i]:
            lines.append(f"{name}: F1={f:.6f} IoU={u:.6f}")
        else:
            lines.append(f"{name}: absent")
    return "\n".join(lines)


def gap_keyframes(center: int, gap: int) -> tuple[int, int]:
    """Keyframe pair ``gap`` frames apart with ``center`` at (or just past) the midpoint."""
    first = center - gap // 2
    return first, first + gap


def gap_degradation(num_frames: int, run: Callable[[tuple[int, int], int], float],
                    gaps: Sequence[int] = DEFAULT_GAPS, center: int | None = None) -> list[tuple[int, float]]:
    """mF1 on a held-out frame as the spacing between labeled frames grows.

    For each gap, keyframes are placed ``gap`` apart around the same evaluation
    frame and ``run(keyframes, eval_frame)`` re-runs propagation and returns
    the score. Keeping the evaluation frame fixed isolates the effect of the
    gap from scene content.
    """
    if not gaps:
        return []
    gaps = [int(g) for g in gaps]
    if min(gaps) < 2:
        raise ValueError("gaps must be >= 2")
    if center is None:
        center = (num_frames - 1) // 2
    for g in gaps:
        a, b = gap_keyframes(center, g)
        if a < 0 or b >= num_frames:
            raise SequenceTooShort(f"{num_frames} frames cannot hold gap {g} around frame {center}")
    return [(g, run(gap_keyframes(center, g), center)) for g in gaps]


def ignore_mask(labels: np.ndarray) -> np.ndarray:
    return labels == IGNORE_INDEX
