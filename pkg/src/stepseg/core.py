"""Domain types for tasks, videos and segmentations.

Labels are plain integers: a step index ``0..S-1`` of the owning task, or
``BACKGROUND`` (-1). Per-timestep labelings are 1-D integer arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

BACKGROUND = -1

Interval = tuple[int, int]


class ValidationError(ValueError):
    pass


def _frozen(a, dtype=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TaskDefinition:
    task_id: str
    steps: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if len(self.steps) < 1:
            raise ValidationError(f"task {self.task_id!r} has no steps")
        if len(set(self.steps)) != len(self.steps):
            raise ValidationError(f"task {self.task_id!r} has duplicate step names")

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def label_name(self, label: int) -> str:
        return "bkg" if label == BACKGROUND else self.steps[label]


@dataclass(frozen=True)
class VideoInstance:
    """One video: a T x F feature matrix plus optional annotations.

    ``reference`` holds annotated ``(step, start, end)`` intervals (half-open).
    ``narration`` maps a step index to its allowed intervals.
    """

    video_id: str
    task_id: str
    features: np.ndarray
    reference: tuple[tuple[int, int, int], ...] | None = None
    narration: Mapping[int, tuple[Interval, ...]] | None = None
    group_dims: tuple[int, ...] | None = None
    split: str | None = None

    def __post_init__(self):
        feats = np.asarray(self.features)
        if feats.ndim != 2:
            raise ValidationError(f"video {self.video_id!r}: features must be 2-D")
        if feats.flags.writeable or feats.dtype != np.float64:
            feats = _frozen(feats, np.float64)
        object.__setattr__(self, "features", feats)
        if self.reference is not None:
            object.__setattr__(
                self, "reference", tuple((int(s), int(a), int(b)) for s, a, b in self.reference)
            )
        if self.narration is not None:
            object.__setattr__(
                self,
                "narration",
                {int(k): tuple((int(a), int(b)) for a, b in v) for k, v in self.narration.items()},
            )
        if self.group_dims is not None:
            object.__setattr__(self, "group_dims", tuple(int(d) for d in self.group_dims))

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: np.ndarray, group_dims=None) -> "VideoInstance":
        return replace(self, features=features, group_dims=group_dims)


@dataclass(frozen=True)
class Segmentation:
    """Ordered ``(label, duration)`` regions that partition a video."""

    regions: tuple[tuple[int, int], ...]

    def __post_init__(self):
        regions = tuple((int(l), int(d)) for l, d in self.regions)
        if not regions:
            raise ValidationError("segmentation must have at least one region")
        if any(d < 1 for _, d in regions):
            raise ValidationError(f"region durations must be >= 1: {regions}")
        object.__setattr__(self, "regions", regions)

    @property
    def T(self) -> int:
        return sum(d for _, d in self.regions)

    @property
    def K(self) -> int:
        return len(self.regions)

    @property
    def labels(self) -> list[int]:
        return [l for l, _ in self.regions]

    @property
    def durations(self) -> list[int]:
        return [d for _, d in self.regions]

    def __iter__(self):
        return iter(self.regions)

    def __len__(self):
        return len(self.regions)


@dataclass(frozen=True)
class Dataset:
    tasks: tuple[TaskDefinition, ...]
    videos: tuple[VideoInstance, ...]

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "videos", tuple(self.videos))

    @property
    def N(self) -> int:
        return len(self.videos)

    def task(self, task_id: str) -> TaskDefinition:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)

    def videos_for(self, task_id: str) -> list[VideoInstance]:
        return [v for v in self.videos if v.task_id == task_id]

    def subset(self, video_ids: Iterable[str]) -> "Dataset":
        keep = set(video_ids)
        return Dataset(self.tasks, tuple(v for v in self.videos if v.video_id in keep))

    def replace_videos(self, videos: Sequence[VideoInstance]) -> "Dataset":
        return Dataset(self.tasks, tuple(videos))


def segmentation_to_frames(seg: Segmentation) -> np.ndarray:
    return np.repeat(np.array(seg.labels, dtype=np.int64), seg.durations)


def frames_to_segmentation(frames: Sequence[int]) -> Segmentation:
    frames = np.asarray(frames, dtype=np.int64)
    if frames.size == 0:
        raise ValidationError("cannot segment an empty labeling")
    change = np.flatnonzero(np.diff(frames)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [frames.size]])
    return Segmentation(tuple((int(frames[s]), int(e - s)) for s, e in zip(starts, ends)))


def resolve_multilabel(video: VideoInstance, task: TaskDefinition) -> np.ndarray:
    """Single reference label per timestep.

    Where annotated intervals overlap, the step earliest in the canonical
    order wins; uncovered timesteps are background.
    """
    if video.reference is None:
        raise ValidationError(f"video {video.video_id!r} has no reference annotations")
    T = video.T
    labels = np.full(T, BACKGROUND, dtype=np.int64)
    # descending step order so earlier steps overwrite later ones
    for step, start, end in sorted(video.reference, key=lambda r: -r[0]):
        if not 0 <= step < task.n_steps:
            raise ValidationError(
                f"video {video.video_id!r}: unknown step index {step} for task {task.task_id!r}"
            )
        labels[max(start, 0) : min(end, T)] = step
    return labels


@dataclass
class Violation:
    video_id: str | None
    message: str

    def __str__(self):
        where = f"video {self.video_id!r}: " if self.video_id is not None else ""
        return where + self.message


def validate_dataset(ds: Dataset) -> list[Violation]:
    """Every invariant violation in ``ds``; empty iff the dataset is valid."""
    report: list[Violation] = []
    tasks = {}
    for t in ds.tasks:
        if t.task_id in tasks:
            report.append(Violation(None, f"duplicate task id {t.task_id!r}"))
        tasks[t.task_id] = t
    seen_ids = set()
    dims: dict[str, tuple[int, str]] = {}
    for v in ds.videos:
        if v.video_id in seen_ids:
            report.append(Violation(v.video_id, "duplicate video id"))
        seen_ids.add(v.video_id)
        task = tasks.get(v.task_id)
        if task is None:
            report.append(Violation(v.video_id, f"unknown task id {v.task_id!r}"))
        if v.T < 1:
            report.append(Violation(v.video_id, "video has no timesteps"))
        if v.group_dims is not None and sum(v.group_dims) != v.n_features:
            report.append(
                Violation(v.video_id, f"group dims {v.group_dims} do not sum to F={v.n_features}")
            )
        if v.task_id in dims and dims[v.task_id][0] != v.n_features:
            first_F, first_vid = dims[v.task_id]
            report.append(
                Violation(
                    v.video_id,
                    f"feature dimensionality {v.n_features} differs from {first_F} "
                    f"(video {first_vid!r}) within task {v.task_id!r}",
                )
            )
        dims.setdefault(v.task_id, (v.n_features, v.video_id))
        n_steps = task.n_steps if task is not None else None
        for step, start, end in v.reference or ():
            if not 0 <= start < end <= v.T:
                report.append(
                    Violation(v.video_id, f"reference interval [{start}, {end}) outside [0, {v.T})")
                )
            if n_steps is not None and not 0 <= step < n_steps:
                report.append(Violation(v.video_id, f"reference step index {step} unknown"))
        for step, intervals in (v.narration or {}).items():
            if n_steps is not None and not 0 <= step < n_steps:
                report.append(Violation(v.video_id, f"constraint step index {step} unknown"))
            for start, end in intervals:
                if not 0 <= start < end <= v.T:
                    report.append(
                        Violation(
                            v.video_id,
                            f"constraint interval [{start}, {end}) for step {step} "
                            f"outside [0, {v.T})",
                        )
                    )
    return report


def reference_labels(ds: Dataset, video: VideoInstance) -> np.ndarray:
    return resolve_multilabel(video, ds.task(video.task_id))
