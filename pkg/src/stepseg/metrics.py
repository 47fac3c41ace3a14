"""Segmentation metrics, Hungarian state mapping and per-task aggregation.

Framewise labelings use task labels (step index, or ``BACKGROUND``).
"""
from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import BACKGROUND, Segmentation, ValidationError, frames_to_segmentation

METRICS = (
    "all_frame_accuracy",
    "step_frame_accuracy",
    "step_recall",
    "sequence_similarity",
    "background_pct",
    "num_step_segments",
)


def _check(pred, ref):
    pred = np.asarray(pred, dtype=np.int64)
    ref = np.asarray(ref, dtype=np.int64)
    if pred.shape != ref.shape:
        raise ValidationError(f"prediction length {pred.shape} != reference length {ref.shape}")
    return pred, ref


def all_frame_accuracy(pred, ref) -> float:
    pred, ref = _check(pred, ref)
    return float(np.mean(pred == ref))


def step_frame_accuracy(pred, ref) -> float:
    """Accuracy over timesteps whose reference is a step (nan if none)."""
    pred, ref = _check(pred, ref)
    steps = ref != BACKGROUND
    if not steps.any():
        return math.nan
    return float(np.mean(pred[steps] == ref[steps]))


def representative_frames(pred) -> dict[int, int]:
    """One frame per predicted step type: the predicted frame of that type
    closest to the midpoint of its extent (earlier frame on ties)."""
    pred = np.asarray(pred, dtype=np.int64)
    out = {}
    for label in np.unique(pred):
        if label == BACKGROUND:
            continue
        frames = np.flatnonzero(pred == label)
        mid = (frames[0] + frames[-1]) // 2
        out[int(label)] = int(frames[np.argmin(np.abs(frames - mid))])
    return out


def step_recall_counts(pred, ref) -> tuple[int, int]:
    """(recovered step types, step types present in the reference)."""
    pred, ref = _check(pred, ref)
    present = set(int(l) for l in np.unique(ref) if l != BACKGROUND)
    recovered = sum(
        1 for label, t in representative_frames(pred).items() if label in present and ref[t] == label
    )
    return recovered, len(present)


def step_recall(preds: Sequence, refs: Sequence) -> float:
    """Recovered step types over present step types, pooled over videos."""
    rec = tot = 0
    for p, r in zip(preds, refs):
        a, b = step_recall_counts(p, r)
        rec += a
        tot += b
    return rec / tot if tot else math.nan


def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def sequence_similarity(pred: Sequence | Segmentation, ref: Sequence | Segmentation) -> float:
    """100 * (1 - edit distance / max length) over region-label sequences."""
    a = pred.labels if isinstance(pred, Segmentation) else list(pred)
    b = ref.labels if isinstance(ref, Segmentation) else list(ref)
    longest = max(len(a), len(b))
    if longest == 0:
        warnings.warn("sequence similarity of two empty sequences defined as 100", stacklevel=2)
        return 100.0
    return 100.0 * (1.0 - levenshtein(a, b) / longest)


def background_pct(pred) -> float:
    pred = np.asarray(pred)
    if pred.size == 0:
        raise ValidationError("empty prediction")
    return 100.0 * float(np.mean(pred == BACKGROUND))


def num_step_segments(pred: Sequence | Segmentation) -> int:
    seg = pred if isinstance(pred, Segmentation) else frames_to_segmentation(pred)
    return sum(1 for l in seg.labels if l != BACKGROUND)


# Hungarian mapping ---------------------------------------------------------


def assignment_matrix(preds: Iterable, refs: Iterable, n_states: int, labels: Sequence[int]) -> np.ndarray:
    """Counts of frames with model state i predicted and reference label j."""
    col = {l: j for j, l in enumerate(labels)}
    m = np.zeros((n_states, len(labels)), dtype=np.int64)
    for p, r in zip(preds, refs):
        p, r = _check(p, r)
        np.add.at(m, (p, np.array([col[int(x)] for x in r], dtype=np.int64)), 1)
    return m


def hungarian_assign(m: np.ndarray) -> np.ndarray:
    """Permutation ``sigma`` (state i -> column sigma[i]) maximizing the
    matched count. Non-square matrices are zero-padded."""
    m = np.asarray(m)
    rows, cols = m.shape
    if rows != cols:
        warnings.warn(f"assignment matrix {m.shape} is not square; padding with zeros", stacklevel=2)
        size = max(rows, cols)
        padded = np.zeros((size, size), dtype=m.dtype)
        padded[:rows, :cols] = m
        m = padded
    r, c = linear_sum_assignment(m, maximize=True)
    sigma = np.empty(m.shape[0], dtype=np.int64)
    sigma[r] = c
    return sigma[:rows]


def map_states(preds: Sequence, refs: Sequence, n_states: int, labels: Sequence[int]) -> dict[int, int]:
    """Accuracy-maximizing state -> label mapping pooled over a task's videos."""
    m = assignment_matrix(preds, refs, n_states, labels)
    sigma = hungarian_assign(m)
    labels = list(labels)
    # states matched to padding columns fall back to background
    return {i: (labels[j] if j < len(labels) else BACKGROUND) for i, j in enumerate(sigma)}


# aggregation ---------------------------------------------------------------


@dataclass
class VideoScores:
    """Per-video counts; ratios are formed after pooling within a task."""

    video_id: str
    task_id: str
    frames: int
    correct: int
    step_frames: int
    step_correct: int
    recovered: int
    present: int
    background_frames: int
    sequence_similarity: float
    num_step_segments: int


def score_video(video_id: str, task_id: str, pred, ref) -> VideoScores:
    pred, ref = _check(pred, ref)
    steps = ref != BACKGROUND
    recovered, present = step_recall_counts(pred, ref)
    pseg, rseg = frames_to_segmentation(pred), frames_to_segmentation(ref)
    return VideoScores(
        video_id,
        task_id,
        frames=int(pred.size),
        correct=int(np.sum(pred == ref)),
        step_frames=int(steps.sum()),
        step_correct=int(np.sum(pred[steps] == ref[steps])),
        recovered=recovered,
        present=present,
        background_frames=int(np.sum(pred == BACKGROUND)),
        sequence_similarity=sequence_similarity(pseg, rseg),
        num_step_segments=num_step_segments(pseg),
    )


@dataclass
class EvalReport:
    per_task: dict[str, dict[str, float]]
    average: dict[str, float]
    flags: list[str] = field(default_factory=list)

    def records(self) -> list[dict]:
        out = [{"task": t, **vals} for t, vals in sorted(self.per_task.items())]
        out.append({"task": "average", **self.average})
        return out

    def table(self) -> str:
        header = ["task", "all_acc", "step_acc", "recall", "seq_sim", "bkg_pct", "n_seg"]
        rows = [header]
        for rec in self.records():
            rows.append([rec["task"]] + [_fmt(rec[m]) for m in METRICS])
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        return "\n".join("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows)


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.1f}"


def _ratio(a, b):
    return 100.0 * a / b if b else math.nan


def aggregate(scores: Sequence[VideoScores]) -> EvalReport:
    """Pool counts within each task, then average tasks unweighted.

    Frame accuracies, step recall and background percentage are pooled over
    the task's frames/videos; sequence similarity and segment counts are
    per-video means.
    """
    by_task: dict[str, list[VideoScores]] = defaultdict(list)
    for s in scores:
        by_task[s.task_id].append(s)
    flags = []
    per_task = {}
    for task, vs in sorted(by_task.items()):
        if not vs:
            flags.append(f"task {task!r} has no videos; excluded")
            continue
        frames = sum(v.frames for v in vs)
        step_frames = sum(v.step_frames for v in vs)
        present = sum(v.present for v in vs)
        if step_frames == 0:
            flags.append(f"task {task!r} has no reference step frames")
        per_task[task] = {
            "all_frame_accuracy": _ratio(sum(v.correct for v in vs), frames),
            "step_frame_accuracy": _ratio(sum(v.step_correct for v in vs), step_frames),
            "step_recall": _ratio(sum(v.recovered for v in vs), present),
            "sequence_similarity": float(np.mean([v.sequence_similarity for v in vs])),
            "background_pct": _ratio(sum(v.background_frames for v in vs), frames),
            "num_step_segments": float(np.mean([v.num_step_segments for v in vs])),
        }
    average = {}
    for m in METRICS:
        vals = [t[m] for t in per_task.values() if not math.isnan(t[m])]
        average[m] = float(np.mean(vals)) if vals else math.nan
    return EvalReport(per_task, average, flags)


def evaluate(predictions: Mapping[str, np.ndarray], references: Mapping[str, np.ndarray], task_of: Mapping[str, str]) -> EvalReport:
    scores = [score_video(vid, task_of[vid], predictions[vid], references[vid]) for vid in sorted(predictions)]
    return aggregate(scores)
