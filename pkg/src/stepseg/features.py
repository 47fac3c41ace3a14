"""Feature preprocessing: per-task, per-group PCA, diagonal covariance and
narration pooling."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Dataset, ValidationError, VideoInstance

VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class FeatureGroupSpec:
    name: str
    dim: int
    n_components: int = 100


@dataclass(frozen=True)
class GroupProjection:
    mean: np.ndarray  # (dim,)
    components: np.ndarray  # (dim, k), orthonormal columns
    explained_variance_ratio: np.ndarray  # (k,)
    n_effective: int  # components with nonzero variance


@dataclass
class PcaModel:
    groups: list[FeatureGroupSpec]
    # task_id -> one projection per group, in declared group order
    projections: dict[str, list[GroupProjection]] = field(default_factory=dict)

    @property
    def output_dim(self) -> int:
        return sum(g.n_components for g in self.groups)

    def explained_variance(self) -> dict[str, dict[str, float]]:
        """Total explained-variance fraction per task and group (informational)."""
        return {
            task: {g.name: float(p.explained_variance_ratio.sum()) for g, p in zip(self.groups, ps)}
            for task, ps in self.projections.items()
        }


def _group_slices(groups: Sequence[FeatureGroupSpec]) -> list[slice]:
    out, start = [], 0
    for g in groups:
        out.append(slice(start, start + g.dim))
        start += g.dim
    return out


def _fit_group(X: np.ndarray, k: int) -> GroupProjection:
    n, dim = X.shape
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    # sign convention: largest-magnitude entry of each eigenvector is positive
    pivot = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[pivot, np.arange(dim)])
    signs[signs == 0] = 1.0
    evecs = evecs * signs
    total = evals.sum()
    ratios = evals[:k] / total if total > 0 else np.zeros(k)
    scale = max(evals[0], 1.0) if dim else 1.0
    n_effective = int(np.sum(evals[:k] > 1e-12 * scale))
    return GroupProjection(mean, evecs[:, :k].copy(), ratios, n_effective)


def pca_fit(ds: Dataset, specs: Sequence[FeatureGroupSpec]) -> PcaModel:
    """Fit one PCA per task and feature group on all frames of the task's videos."""
    specs = list(specs)
    for g in specs:
        if g.n_components > g.dim:
            raise ValidationError(
                f"group {g.name!r}: {g.n_components} components exceed raw dim {g.dim}"
            )
    slices = _group_slices(specs)
    total_dim = sum(g.dim for g in specs)
    model = PcaModel(specs)
    for task in ds.tasks:
        videos = ds.videos_for(task.task_id)
        if not videos:
            continue
        X = np.concatenate([v.features for v in videos], axis=0)
        if X.shape[1] != total_dim:
            raise ValidationError(
                f"task {task.task_id!r}: features have {X.shape[1]} dims, groups declare {total_dim}"
            )
        projections = []
        for g, sl in zip(specs, slices):
            if X.shape[0] < g.n_components:
                raise ValidationError(
                    f"task {task.task_id!r}: {X.shape[0]} frames < {g.n_components} components "
                    f"for group {g.name!r}"
                )
            proj = _fit_group(X[:, sl], g.n_components)
            if proj.n_effective < g.n_components:
                warnings.warn(
                    f"task {task.task_id!r}, group {g.name!r}: only {proj.n_effective} of "
                    f"{g.n_components} components carry variance",
                    stacklevel=2,
                )
            projections.append(proj)
        model.projections[task.task_id] = projections
    return model


def pca_transform(model: PcaModel, video: VideoInstance) -> np.ndarray:
    """Center and project each group, then concatenate in group order."""
    if video.task_id not in model.projections:
        raise KeyError(f"PCA model has no projection for task {video.task_id!r}")
    projections = model.projections[video.task_id]
    blocks = []
    for sl, proj in zip(_group_slices(model.groups), projections):
        blocks.append((video.features[:, sl] - proj.mean) @ proj.components)
    return np.concatenate(blocks, axis=1)


def transform_dataset(model: PcaModel, ds: Dataset) -> Dataset:
    dims = tuple(g.n_components for g in model.groups)
    return ds.replace_videos([v.with_features(pca_transform(model, v), dims) for v in ds.videos])


def empirical_diag_cov(
    features: Sequence[np.ndarray], floor: float = VARIANCE_FLOOR
) -> np.ndarray:
    """Per-dimension population variance over all frames, floored at ``floor``."""
    X = np.concatenate([np.asarray(f, dtype=np.float64) for f in features], axis=0)
    if X.shape[0] < 2:
        raise ValidationError("need at least 2 frames to estimate a covariance")
    return np.maximum(X.var(axis=0), floor)


def narration_pool(
    word_embeddings: Sequence[tuple[float, np.ndarray]],
    T: int,
    window: int = 5,
    normalize: bool = False,
    dim: int | None = None,
) -> np.ndarray:
    """Hanning-weighted sum of word vectors in a window centered on each timestep.

    Each word is binned to its nearest integer second. With ``normalize`` the
    weights at each row are divided by their sum.
    """
    vectors = [np.asarray(v, dtype=np.float64) for _, v in word_embeddings]
    if vectors:
        E = vectors[0].shape[0]
        if any(v.shape != (E,) for v in vectors):
            raise ValidationError("word embeddings have mismatched dimensionality")
    elif dim is None:
        raise ValidationError("dim is required when there are no words")
    else:
        E = dim
    taper = np.hanning(window)
    half = window // 2
    out = np.zeros((T, E))
    weight_sum = np.zeros(T)
    for (time, vec) in zip((t for t, _ in word_embeddings), vectors):
        center = int(np.floor(time + 0.5))
        for offset in range(-half, half + 1):
            row = center - offset
            if 0 <= row < T:
                w = taper[offset + half]
                out[row] += w * vec
                weight_sum[row] += w
    if normalize:
        nz = weight_sum > 0
        out[nz] /= weight_sum[nz, None]
    return out
