"""Feature-agnostic baselines built from training-set label statistics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import BACKGROUND, Segmentation, TaskDefinition, ValidationError

PREDICTORS = ("bkg", "sample", "uniform")


@dataclass(frozen=True)
class TaskStats:
    """Frame-label distribution for one task; labels ordered ``0..S-1, bkg``."""

    task_id: str
    labels: tuple[int, ...]
    probs: tuple[float, ...]
    background_fraction: float

    @classmethod
    def from_labelings(cls, task: TaskDefinition, labelings: Sequence[np.ndarray], background_fraction: float | None = None):
        labels = tuple(range(task.n_steps)) + (BACKGROUND,)
        frames = np.concatenate([np.asarray(l, dtype=np.int64) for l in labelings])
        counts = np.array([np.sum(frames == l) for l in labels], dtype=np.float64)
        probs = counts / counts.sum()
        if background_fraction is None:
            background_fraction = float(probs[-1])
        return cls(task.task_id, labels, tuple(float(p) for p in probs), background_fraction)


def corpus_background_fraction(labelings: Sequence[np.ndarray]) -> float:
    frames = np.concatenate([np.asarray(l) for l in labelings])
    return float(np.mean(frames == BACKGROUND))


def predict_background(T: int) -> np.ndarray:
    if T < 1:
        raise ValidationError("T must be >= 1")
    return np.full(T, BACKGROUND, dtype=np.int64)


def sample_from_train(stats: TaskStats, T: int, seed=None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.choice(np.array(stats.labels, dtype=np.int64), size=T, p=np.array(stats.probs))


def _split_evenly(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def ordered_uniform(task: TaskDefinition | int, T: int, bg_fraction: float) -> Segmentation:
    """bkg, s1, bkg, ..., sS, bkg with equal step lengths and equal gaps.

    Remainders go to the earliest regions; empty gaps are dropped.
    """
    S = task if isinstance(task, int) else task.n_steps
    if T < S:
        raise ValidationError(f"cannot place {S} steps in {T} timesteps")
    if not 0.0 <= bg_fraction <= 1.0:
        raise ValidationError("background fraction must lie in [0, 1]")
    step_time = int(np.floor((1.0 - bg_fraction) * T + 0.5))
    step_time = min(max(step_time, S), T)
    steps = _split_evenly(step_time, S)
    gaps = _split_evenly(T - step_time, S + 1)
    regions = []
    for j in range(S):
        if gaps[j]:
            regions.append((BACKGROUND, gaps[j]))
        regions.append((j, steps[j]))
    if gaps[S]:
        regions.append((BACKGROUND, gaps[S]))
    return Segmentation(tuple(regions))
