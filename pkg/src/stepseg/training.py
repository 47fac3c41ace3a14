"""Training regimes for the segmental model.

Gradients come straight from segment statistics: the derivative of
``log p(x)`` with respect to any log-potential is its posterior expected
count, so one forward-backward pass yields the whole gradient. The
conditional-likelihood gradient is the difference between the reference
counts and the posterior counts.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .core import Segmentation, ValidationError
from .features import VARIANCE_FLOOR, empirical_diag_cov
from .model import (
    EmissionMask,
    ModelParams,
    NoValidPathError,
    SegmentStats,
    duration_tables,
    log_joint,
    posterior_stats,
    segmentation_stats,
)

log = logging.getLogger(__name__)

BLOCKS = ("init", "trans", "rho", "means")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-3
    batch_size: int = 5
    decay: float = 0.5
    patience: int = 1
    max_epochs: int = 30
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_noise: float = 0.01

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch size must be >= 1")


# parameterization ----------------------------------------------------------


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30))))


def _log_softmax(z, axis=-1):
    from .model import _masked_log_softmax

    if axis != -1:
        raise ValueError("only the last axis is supported")
    return _masked_log_softmax(z)


def params_to_theta(params: ModelParams) -> dict[str, np.ndarray]:
    """Unconstrained view: log-probabilities act as softmax scores, and
    duration means pass through softplus."""
    return {
        "init": np.array(params.log_initial),
        "trans": np.array(params.log_transition),
        "rho": inverse_softplus(params.durations),
        "means": np.array(params.means),
    }


def theta_to_params(theta: dict[str, np.ndarray], like: ModelParams) -> ModelParams:
    return replace(
        like,
        log_initial=_log_softmax(theta["init"]),
        log_transition=_log_softmax(theta["trans"]),
        durations=softplus(theta["rho"]),
        means=theta["means"],
    )


def _truncated_mean(table: np.ndarray) -> np.ndarray:
    d = np.arange(1, table.shape[1] + 1)
    return np.exp(table) @ d


def stats_gradient(
    params: ModelParams, stats: SegmentStats, features: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradient, w.r.t. the unconstrained parameters, of a function whose
    derivative in every expanded log-potential equals ``stats``.

    Linear in ``stats``; expanded-label contributions are summed into the
    tied base parameters.
    """
    m = params.label_map
    n_base = params.n_base
    X = np.asarray(features, dtype=np.float64)
    T = X.shape[0]

    # structure: d/dz log_softmax(z)_i . c = c - sum(c) softmax(z)
    g_init_exp = stats.init - stats.init.sum() * np.exp(params.initial)
    g_init = np.zeros(n_base)
    np.add.at(g_init, m, g_init_exp)
    p_trans = np.exp(params.transition)
    g_trans_exp = stats.trans - stats.trans.sum(axis=1, keepdims=True) * p_trans
    g_trans = np.zeros((n_base, n_base))
    np.add.at(g_trans, (m[:, None], m[None, :]), g_trans_exp)

    # durations: d/dlam log p(d) = (d - E[d]) / lam under the truncated pmf
    table, _ = duration_tables(params, T)
    support = table.shape[1]
    lam = params.expanded_durations
    d = np.arange(1, support + 1)
    mean_d = _truncated_mean(table)
    dur_counts = _pad(stats.dur, support)
    final_counts = _pad(stats.dur_final, support)
    g_lam_exp = (dur_counts @ d - dur_counts.sum(1) * mean_d) / lam
    if params.final_duration == "survival":
        pmf = np.exp(table)
        tail_mass = np.cumsum(pmf[:, ::-1], axis=1)[:, ::-1]
        tail_first = np.cumsum((pmf * d)[:, ::-1], axis=1)[:, ::-1]
        with np.errstate(invalid="ignore", divide="ignore"):
            tail_mean = np.where(tail_mass > 0, tail_first / tail_mass, 0.0)
        g_lam_exp += ((final_counts * tail_mean).sum(1) - final_counts.sum(1) * mean_d) / lam
    else:
        g_lam_exp += (final_counts @ d - final_counts.sum(1) * mean_d) / lam
    if support == 1:
        g_lam_exp[:] = 0.0
    g_lam = np.zeros(n_base)
    np.add.at(g_lam, m, g_lam_exp)
    g_rho = g_lam * expit(params_to_theta(params)["rho"])

    # emissions: d/dmu_l sum_t gamma_tl log N(x_t; mu_l, var)
    occ = stats.occupancy
    mu_exp = params.expanded_means
    g_mu_exp = (occ.T @ X - occ.sum(0)[:, None] * mu_exp) / params.variances[None, :]
    g_mu = np.zeros_like(params.means)
    np.add.at(g_mu, m, g_mu_exp)
    return {"init": g_init, "trans": g_trans, "rho": g_rho, "means": g_mu}


def _pad(a: np.ndarray, width: int) -> np.ndarray:
    if a.shape[1] >= width:
        return a[:, :width]
    return np.pad(a, ((0, 0), (0, width - a.shape[1])))


def marginal_objective(
    params: ModelParams, features: np.ndarray, mask: EmissionMask | None = None
) -> tuple[float, dict[str, np.ndarray]]:
    """log p(x) and its gradient."""
    log_z, stats = posterior_stats(params, features, mask)
    return log_z, stats_gradient(params, stats, features)


def conditional_objective(
    params: ModelParams, seg: Segmentation, features: np.ndarray, mask: EmissionMask | None = None
) -> tuple[float, dict[str, np.ndarray]]:
    """log p(seg | x) = log p(seg, x) - log p(x) and its gradient."""
    log_z, post = posterior_stats(params, features, mask)
    joint = log_joint(params, seg, features, mask)
    D = post.dur.shape[1]
    ref = segmentation_stats(seg, params.n_labels, max(D, max(seg.durations)))
    return joint - log_z, stats_gradient(params, ref - post, features)


# optimizer -----------------------------------------------------------------


class Adam:
    """Adaptive-moment ascent over a dict of arrays."""

    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, theta: dict[str, np.ndarray], grad: dict[str, np.ndarray], blocks=BLOCKS):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k in blocks:
            g = grad[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            finite = np.isfinite(theta[k])
            theta[k] = np.where(finite, theta[k] + self.lr * m_hat / (np.sqrt(v_hat) + self.eps), theta[k])


def _run(
    init: ModelParams,
    items: Sequence[tuple[str, np.ndarray, EmissionMask | None, Segmentation | None]],
    objective: Callable,
    config: TrainConfig,
    callback: Callable[[int, float, float], None] | None,
    blocks=BLOCKS,
) -> ModelParams:
    rng = np.random.default_rng(config.seed)
    theta = params_to_theta(init)
    params = init
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    best = -np.inf
    stale = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(items))
        total = 0.0
        for b in range(0, len(items), config.batch_size):
            # reduce in sorted video-id order for reproducible sums
            batch = sorted((items[i] for i in order[b : b + config.batch_size]), key=lambda it: it[0])
            grad = {k: np.zeros_like(v) for k, v in theta.items()}
            batch_obj = 0.0
            for vid, X, mask, seg in batch:
                try:
                    val, g = objective(params, X, mask, seg)
                except NoValidPathError as exc:
                    raise TrainingError(f"video {vid!r}: {exc}") from exc
                if not np.isfinite(val):
                    raise TrainingError(
                        f"non-finite objective {val} on video {vid!r} at epoch {epoch}"
                    )
                batch_obj += val
                for k in grad:
                    grad[k] += g[k]
            for k in grad:
                grad[k] /= len(batch)
                if not np.all(np.isfinite(grad[k])):
                    raise TrainingError(f"non-finite gradient in block {k!r} at epoch {epoch}")
            total += batch_obj
            opt.step(theta, grad, blocks)
            params = theta_to_params(theta, params)
        log.info("epoch %d objective %.4f lr %.2e", epoch, total, opt.lr)
        if callback is not None:
            callback(epoch, total, opt.lr)
        if total > best:
            best = total
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                opt.lr *= config.decay
                stale = 0
    return params


def _marginal(params, X, mask, seg):
    return marginal_objective(params, X, mask)


def _conditional(params, X, mask, seg):
    return conditional_objective(params, seg, X, mask)


# initialization ------------------------------------------------------------


def kmeanspp_frames(frames: np.ndarray, k: int, variances: np.ndarray, rng) -> np.ndarray:
    """k distinct frames chosen by D^2 sampling in variance-scaled distance."""
    n = frames.shape[0]
    if n < k:
        raise ValidationError(f"need at least {k} frames to initialize {k} means")
    scaled = frames / np.sqrt(variances)
    chosen = [int(rng.integers(n))]
    dist = np.sum((scaled - scaled[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        p = dist.copy()
        p[chosen] = 0.0
        if p.sum() <= 0:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        else:
            nxt = int(rng.choice(n, p=p / p.sum()))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sum((scaled - scaled[nxt]) ** 2, axis=1))
    return frames[chosen].copy()


def random_init(
    features: Sequence[np.ndarray],
    n_labels: int,
    seed: int = 0,
    noise: float = 0.01,
    variances: np.ndarray | None = None,
    max_duration: int | None = None,
    space=None,
) -> ModelParams:
    """Near-uniform structure, means at spread-out random frames, and duration
    means at the average length over ``n_labels``."""
    rng = np.random.default_rng(seed)
    if variances is None:
        variances = empirical_diag_cov(features)
    frames = np.concatenate(features, axis=0)
    means = kmeanspp_frames(frames, n_labels, variances, rng)
    mean_T = float(np.mean([f.shape[0] for f in features]))
    if space is not None:
        # expanded spaces traverse 2S+1 regions; S+1 of them are base labels
        lam0 = mean_T / space.n_states
    else:
        lam0 = mean_T / n_labels
    return ModelParams(
        log_initial=_log_softmax(noise * rng.standard_normal(n_labels)),
        log_transition=_log_softmax(noise * rng.standard_normal((n_labels, n_labels))),
        durations=np.full(n_labels, max(lam0, 1.0)),
        means=means,
        variances=variances,
        max_duration=max_duration,
        space=space,
    )


# regimes -------------------------------------------------------------------


def train_unsupervised(
    features: Sequence[np.ndarray],
    config: TrainConfig | None = None,
    *,
    n_labels: int | None = None,
    init: ModelParams | None = None,
    masks: Sequence[EmissionMask | None] | None = None,
    space=None,
    video_ids: Sequence[str] | None = None,
    max_duration: int | None = None,
    callback=None,
) -> ModelParams:
    """Maximize the summed log marginal likelihood of the videos' features."""
    config = config or TrainConfig()
    if init is None:
        if n_labels is None:
            raise ValidationError("either n_labels or init is required")
        init = random_init(
            features, n_labels, config.seed, config.init_noise,
            max_duration=max_duration, space=space,
        )
    elif space is not None and init.space is None:
        init = replace(init, space=space)
    ids = list(video_ids) if video_ids is not None else [f"{i:06d}" for i in range(len(features))]
    masks = list(masks) if masks is not None else [None] * len(features)
    items = [(vid, np.asarray(X, np.float64), mk, None) for vid, X, mk in zip(ids, features, masks)]
    return _run(init, items, _marginal, config, callback)


def train_discriminative(
    features: Sequence[np.ndarray],
    segmentations: Sequence[Segmentation],
    config: TrainConfig | None = None,
    *,
    n_labels: int | None = None,
    init: ModelParams | None = None,
    video_ids: Sequence[str] | None = None,
    max_duration: int | None = None,
    callback=None,
) -> ModelParams:
    """Maximize the summed log conditional likelihood of reference
    segmentations (model labels) given features."""
    config = config or TrainConfig()
    if init is None:
        if n_labels is None:
            raise ValidationError("either n_labels or init is required")
        init = random_init(features, n_labels, config.seed, config.init_noise, max_duration=max_duration)
    ids = list(video_ids) if video_ids is not None else [f"{i:06d}" for i in range(len(features))]
    items = [
        (vid, np.asarray(X, np.float64), None, seg)
        for vid, X, seg in zip(ids, features, segmentations)
    ]
    return _run(init, items, _conditional, config, callback)


def fit_supervised_generative(
    features: Sequence[np.ndarray],
    segmentations: Sequence[Segmentation],
    n_labels: int,
    smoothing: float = 0.1,
    variances: np.ndarray | None = None,
    max_duration: int | None = None,
    variance_floor: float = VARIANCE_FLOOR,
) -> ModelParams:
    """Closed-form maximum joint likelihood from sufficient statistics.

    Segmentations use model labels. Structural counts get add-``smoothing``.
    """
    if len(features) != len(segmentations) or not features:
        raise ValidationError("need one segmentation per video and at least one video")
    F = np.asarray(features[0]).shape[1]
    init_counts = np.full(n_labels, smoothing, dtype=np.float64)
    trans_counts = np.full((n_labels, n_labels), smoothing, dtype=np.float64)
    dur_sum = np.zeros(n_labels)
    dur_n = np.zeros(n_labels)
    frame_sum = np.zeros((n_labels, F))
    frame_n = np.zeros(n_labels)
    for X, seg in zip(features, segmentations):
        X = np.asarray(X, dtype=np.float64)
        if seg.T != X.shape[0]:
            raise ValidationError("segmentation length does not match features")
        labels = seg.labels
        init_counts[labels[0]] += 1
        for a, b in zip(labels, labels[1:]):
            trans_counts[a, b] += 1
        for l, d in seg.regions:
            dur_sum[l] += d
            dur_n[l] += 1
        frames = np.repeat(labels, seg.durations)
        np.add.at(frame_sum, frames, X)
        frame_n += np.bincount(frames, minlength=n_labels)
    if variances is None:
        variances = empirical_diag_cov(features, variance_floor)
    global_mean = np.concatenate(features, axis=0).mean(axis=0)
    means = np.empty((n_labels, F))
    for l in range(n_labels):
        if frame_n[l] > 0:
            means[l] = frame_sum[l] / frame_n[l]
        else:
            warnings.warn(f"label {l} never observed; emission mean set to the global mean", stacklevel=2)
            means[l] = global_mean
    observed = dur_n > 0
    fallback = dur_sum.sum() / dur_n.sum()
    durations = np.where(observed, dur_sum / np.maximum(dur_n, 1), fallback)
    # rows never left (possible without smoothing) become uniform
    row_tot = trans_counts.sum(axis=1, keepdims=True)
    trans_counts = np.where(row_tot > 0, trans_counts, 1.0)
    with np.errstate(divide="ignore"):
        log_initial = np.log(init_counts / init_counts.sum())
        log_transition = np.log(trans_counts / trans_counts.sum(axis=1, keepdims=True))
    return ModelParams(
        log_initial=log_initial,
        log_transition=log_transition,
        durations=durations,
        means=means,
        variances=variances,
        max_duration=max_duration,
    )
