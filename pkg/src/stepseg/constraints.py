"""Weak supervision: canonical-order state spaces and narration masks."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .core import BACKGROUND, Segmentation, TaskDefinition, ValidationError, VideoInstance, frames_to_segmentation, segmentation_to_frames
from .model import DEFAULT_PENALTY, EmissionMask, ModelParams


@dataclass(frozen=True)
class OrderedStateSpace:
    """States ``bkg0, s1, bkg1, s2, ..., sS, bkgS`` for a task with S steps.

    ``label_map`` sends each state to its base model label: step j (0-based)
    for ``s_{j+1}`` and ``S`` for every background copy.
    """

    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValidationError("ordered state space needs at least one step")

    @property
    def n_states(self) -> int:
        return 2 * self.n_steps + 1

    @property
    def names(self) -> tuple[str, ...]:
        out = ["bkg0"]
        for j in range(1, self.n_steps + 1):
            out += [f"s{j}", f"bkg{j}"]
        return tuple(out)

    @property
    def label_map(self) -> np.ndarray:
        S = self.n_steps
        m = np.full(self.n_states, S, dtype=np.int64)
        m[1::2] = np.arange(S)
        return m

    @staticmethod
    def step_state(j: int) -> int:
        """State index of the (0-based) step j."""
        return 2 * j + 1

    @property
    def background_states(self) -> np.ndarray:
        return np.arange(0, self.n_states, 2)

    @property
    def init_allowed(self) -> np.ndarray:
        a = np.zeros(self.n_states, bool)
        a[[0, 1]] = True
        return a

    @property
    def trans_allowed(self) -> np.ndarray:
        S, n = self.n_steps, self.n_states
        a = np.zeros((n, n), bool)
        for j in range(S):
            s = self.step_state(j)
            a[s, s + 1] = True  # s_j -> bkg_j
            if j + 1 < S:
                a[s, s + 2] = True  # s_j -> s_{j+1}
                a[s + 1, s + 2] = True  # bkg_j -> s_{j+1}
        a[0, 1] = True  # bkg0 -> s1
        return a

    @property
    def terminal_allowed(self) -> np.ndarray:
        a = np.zeros(self.n_states, bool)
        a[[-2, -1]] = True
        return a

    def allowed_transitions(self) -> set[tuple[str, str]]:
        names = self.names
        return {(names[i], names[j]) for i, j in zip(*np.nonzero(self.trans_allowed))}


def build_ordered_space(task: TaskDefinition | int) -> OrderedStateSpace:
    n_steps = task if isinstance(task, int) else task.n_steps
    return OrderedStateSpace(n_steps)


def constrain_params(params: ModelParams, space: OrderedStateSpace) -> ModelParams:
    """Attach the ordered space; structure is renormalized over allowed entries.

    Base parameters must cover S steps plus background. All background
    copies share the base background duration and emission parameters.
    """
    if params.n_base != space.n_steps + 1:
        raise ValidationError(
            f"model has {params.n_base} labels, ordered space needs {space.n_steps + 1}"
        )
    return replace(params, space=space)


def narration_mask(
    video: VideoInstance,
    constraints: Mapping[int, Sequence[tuple[int, int]]] | None = None,
    space: OrderedStateSpace | None = None,
    n_steps: int | None = None,
    penalty: float = DEFAULT_PENALTY,
) -> EmissionMask:
    """Penalize step j at timestep t when j is constrained and t lies outside
    all of j's intervals. Background states are never penalized.

    Without a space the mask covers base labels ``0..S-1`` plus background.
    """
    if constraints is None:
        constraints = video.narration or {}
    if space is not None:
        n_steps = space.n_steps
    if n_steps is None:
        raise ValidationError("n_steps is required without a state space")
    T = video.T
    step_ok = np.ones((T, n_steps), bool)
    for step, intervals in constraints.items():
        if not 0 <= step < n_steps:
            raise ValidationError(f"video {video.video_id!r}: constraint on unknown step {step}")
        allowed = np.zeros(T, bool)
        for start, end in intervals:
            if not 0 <= start < end <= T:
                raise ValidationError(
                    f"video {video.video_id!r}: constraint interval [{start}, {end}) outside [0, {T})"
                )
            allowed[start:end] = True
        step_ok[:, step] = allowed
    if space is None:
        full = np.concatenate([step_ok, np.ones((T, 1), bool)], axis=1)
    else:
        full = np.ones((T, space.n_states), bool)
        full[:, 1::2] = step_ok
    return EmissionMask(full, penalty)


def merge_background(seg: Segmentation, space: OrderedStateSpace) -> Segmentation:
    """Expanded states to task labels (background = -1), merging neighbours."""
    frames = segmentation_to_frames(seg)
    m = space.label_map[frames]
    task_labels = np.where(m == space.n_steps, BACKGROUND, m)
    return frames_to_segmentation(task_labels)


def satisfies_order(seg: Segmentation, n_steps: int) -> bool:
    """Each step exactly once, in canonical order (task labels)."""
    steps = [l for l in seg.labels if l != BACKGROUND]
    return steps == list(range(n_steps))
