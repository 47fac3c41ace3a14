"""Synthetic datasets sampled from known segmental models."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .constraints import build_ordered_space
from .core import BACKGROUND, Dataset, Segmentation, TaskDefinition, ValidationError, VideoInstance, frames_to_segmentation, segmentation_to_frames
from .model import ModelParams, sample, sampled_occupancy, to_task_labels


@dataclass
class SynthSpec:
    n_steps: int = 3
    n_videos: int = 50
    T_range: tuple[int, int] = (40, 80)
    separation: float = 5.0  # pairwise distance between label means, in sigma units
    n_features: int | None = None
    step_duration: float = 8.0
    background_fraction: float = 0.5
    ordered: bool = False
    n_tasks: int = 1
    narration_slack: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.separation <= 0:
            raise ValidationError("separation must be positive")
        lo, hi = self.T_range
        if not 1 <= lo <= hi:
            raise ValidationError(f"invalid T range {self.T_range}")
        if self.n_steps < 1 or self.n_videos < 1 or self.n_tasks < 1:
            raise ValidationError("n_steps, n_videos and n_tasks must be positive")
        if not 0.0 < self.background_fraction < 1.0:
            raise ValidationError("background fraction must lie strictly between 0 and 1")
        if self.n_features is not None and self.n_features < self.n_steps + 1:
            raise ValidationError("need at least one feature dimension per label")


@dataclass
class SynthResult:
    dataset: Dataset
    params: dict[str, ModelParams]
    # expanded-label segmentations as sampled
    segmentations: dict[str, Segmentation]
    expected_background_fraction: dict[str, float] = field(default_factory=dict)


def _duration_cap(durations: np.ndarray) -> int:
    lam = float(np.max(durations))
    return int(math.ceil(lam + 6.0 * math.sqrt(lam)))


def _with_durations(params: ModelParams, labels, lam: float) -> ModelParams:
    durations = params.durations.copy()
    durations[labels] = lam
    return replace(params, durations=durations, max_duration=_duration_cap(durations))


def background_fraction(params: ModelParams, n_steps: int, T_range: tuple[int, int]) -> float:
    """Expected background share of frames for T uniform over ``T_range``,
    under the sampler's process (pooled over videos)."""
    lo, hi = T_range
    occ = sampled_occupancy(params, hi)[:, params.label_map == n_steps].sum(axis=1)
    cum = np.cumsum(occ)
    Ts = np.arange(lo, hi + 1)
    return float(cum[Ts - 1].sum() / Ts.sum())


def calibrate_background(params: ModelParams, spec: SynthSpec) -> ModelParams:
    """Solve for duration means giving the requested background fraction.

    Unordered models vary the background duration. Ordered models end in an
    absorbing background state, so there the shared step duration varies
    instead.
    """
    S = spec.n_steps
    labels = list(range(S)) if spec.ordered else [S]

    def gap(log_lam):
        p = _with_durations(params, labels, math.exp(log_lam))
        return background_fraction(p, S, spec.T_range) - spec.background_fraction

    lo, hi = math.log(0.05), math.log(4.0 * spec.T_range[1])
    if gap(lo) * gap(hi) > 0:
        raise ValidationError(
            f"background fraction {spec.background_fraction} is not reachable for this spec"
        )
    return _with_durations(params, labels, math.exp(brentq(gap, lo, hi, xtol=1e-10)))


def _true_params(spec: SynthSpec, rng) -> ModelParams:
    S = spec.n_steps
    n = S + 1
    F = spec.n_features or n
    means = np.zeros((n, F))
    means[np.arange(n), np.arange(n)] = spec.separation / np.sqrt(2.0)
    if spec.ordered:
        log_init = np.log(np.full(n, 1.0 / n))
        trans = np.full((n, n), 1.0 / n)
        trans[:S, S] = 0.7  # step -> background gap more often than step -> step
        trans /= trans.sum(axis=1, keepdims=True)
        log_trans = np.log(trans)
    else:
        # background alternates with steps; steps return to background w.p. 1/2
        log_init = np.log(rng.dirichlet(np.full(n, 5.0)))
        trans = np.zeros((n, n))
        trans[:S, S] = 0.5
        for j in range(S):
            others = [k for k in range(S) if k != j]
            if others:
                trans[j, others] = 0.5 / len(others)
            else:
                trans[j, S] = 1.0
        trans[S, :S] = 1.0 / S
        with np.errstate(divide="ignore"):
            log_trans = np.log(trans)
    # the background duration is set later by calibrate_background
    durations = np.full(n, float(spec.step_duration))
    params = ModelParams(log_init, log_trans, durations, means, np.ones(F))
    if spec.ordered:
        from .constraints import constrain_params

        params = constrain_params(params, build_ordered_space(S))
    return params


def synth_generate(spec: SynthSpec) -> SynthResult:
    rng = np.random.default_rng(spec.seed)
    tasks, videos = [], []
    all_params, segs, expected = {}, {}, {}
    for k in range(spec.n_tasks):
        task_id = f"task{k}"
        task = TaskDefinition(task_id, tuple(f"step{j + 1}" for j in range(spec.n_steps)))
        tasks.append(task)
        params = calibrate_background(_true_params(spec, rng), spec)
        all_params[task_id] = params
        for i in range(spec.n_videos):
            vid = f"{task_id}_v{i:04d}"
            T = int(rng.integers(spec.T_range[0], spec.T_range[1] + 1))
            seg, X = sample(params, T, rng)
            segs[vid] = seg
            frames = to_task_labels(params.label_map[segmentation_to_frames(seg)], spec.n_steps)
            task_seg = frames_to_segmentation(frames)
            reference, narration, t = [], {}, 0
            for label, d in task_seg.regions:
                if label != BACKGROUND:
                    reference.append((label, t, t + d))
                    lo = max(0, t - spec.narration_slack)
                    hi = min(T, t + d + spec.narration_slack)
                    narration.setdefault(label, []).append((lo, hi))
                t += d
            videos.append(
                VideoInstance(vid, task_id, X.astype(np.float32).astype(np.float64), tuple(reference), narration)
            )
        expected[task_id] = background_fraction(params, spec.n_steps, spec.T_range)
    return SynthResult(Dataset(tuple(tasks), tuple(videos)), all_params, segs, expected)
