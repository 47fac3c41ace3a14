"""Hidden semi-Markov model over labeled regions.

A video of T timesteps is scored as a sequence of regions ``(r_k, d_k)``::

    log p = log pi(r_1) + sum_k log A(r_{k-1}, r_k) + sum_k log pd(d_k | r_k)
            + sum_t log N(x_t; mu_{l_t}, diag(var))

Durations follow a Poisson pmf renormalized over ``1..D_max``. All dynamic
programs run in log space over a lattice of (start, duration, label) segments.

When a model carries a state space (see :mod:`stepseg.constraints`), the
lattice runs over the expanded labels; expanded labels index into the base
parameters through ``space.label_map`` so tied states share parameters.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Any

import numpy as np
from scipy.special import gammaln

from .core import BACKGROUND, Segmentation, ValidationError

NEG_INF = -np.inf
DEFAULT_PENALTY = -1e4
LOG_2PI = math.log(2.0 * math.pi)


class NoValidPathError(RuntimeError):
    pass


class NoValidPathWarning(RuntimeWarning):
    pass


def logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    """log(sum(exp(a))) that returns -inf (quietly) for all -inf slices."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return out.reshape(())[()]
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class EmissionMask:
    """``allowed[t, l]`` False means label ``l`` is penalized at timestep ``t``."""

    allowed: np.ndarray
    penalty: float = DEFAULT_PENALTY

    @property
    def T(self) -> int:
        return self.allowed.shape[0]


@dataclass(frozen=True)
class ModelParams:
    """Base parameters over ``n`` labels.

    For a task with S steps the base labels are ``0..S-1`` (steps) and ``S``
    (background). ``durations`` are Poisson means; ``variances`` is the
    shared diagonal covariance. ``max_duration=None`` picks D_max per video
    from the duration means.
    """

    log_initial: np.ndarray
    log_transition: np.ndarray
    durations: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    max_duration: int | None = None
    space: Any = None
    final_duration: str = "pmf"  # "pmf" or "survival"

    def __post_init__(self):
        for name in ("log_initial", "log_transition", "durations", "means", "variances"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = self.log_initial.shape[0]
        if self.log_transition.shape != (n, n):
            raise ValidationError("transition matrix shape does not match label count")
        if self.durations.shape != (n,) or self.means.shape[0] != n:
            raise ValidationError("duration/mean parameters do not match label count")
        if self.means.shape[1] != self.variances.shape[0]:
            raise ValidationError("means and variances disagree on feature dimension")
        if np.any(self.durations <= 0):
            raise ValidationError("duration means must be positive")
        if np.any(self.variances <= 0):
            raise ValidationError("variances must be positive")
        if self.max_duration is not None and self.max_duration < 1:
            raise ValidationError("max_duration must be >= 1")
        if self.final_duration not in ("pmf", "survival"):
            raise ValidationError(f"unknown final_duration mode {self.final_duration!r}")
        if self.space is not None and int(np.max(self.space.label_map)) >= n:
            raise ValidationError("state space refers to labels outside the model")

    @property
    def n_base(self) -> int:
        return self.log_initial.shape[0]

    @property
    def n_labels(self) -> int:
        return self.n_base if self.space is None else len(self.space.label_map)

    @property
    def n_features(self) -> int:
        return self.means.shape[1]

    @property
    def label_map(self) -> np.ndarray:
        if self.space is None:
            return np.arange(self.n_base)
        return np.asarray(self.space.label_map)

    def duration_support(self, T: int | None = None) -> int:
        if self.max_duration is not None:
            return int(self.max_duration)
        lam = float(np.max(self.durations))
        D = math.ceil(lam + 6.0 * math.sqrt(lam))
        if T is None:
            return int(max(1, D))
        D = min(T, D)
        if self.space is not None:
            # the ordered chain has no self-loops; keep every T reachable
            D = max(D, -(-T // self.space.n_states))
        return int(max(1, D))

    def as_hmm(self) -> "ModelParams":
        """Duration ablation: every region lasts one timestep."""
        return replace(self, max_duration=1)

    # expanded (lattice) views ------------------------------------------------

    def _allowed(self):
        n = self.n_labels
        if self.space is None:
            return np.ones(n, bool), np.ones((n, n), bool), np.ones(n, bool)
        s = self.space
        return np.asarray(s.init_allowed), np.asarray(s.trans_allowed), np.asarray(s.terminal_allowed)

    @property
    def initial(self) -> np.ndarray:
        """Expanded log initial distribution (disallowed entries -inf)."""
        init_ok, _, _ = self._allowed()
        scores = np.where(init_ok, self.log_initial[self.label_map], NEG_INF)
        return _masked_log_softmax(scores)

    @property
    def transition(self) -> np.ndarray:
        _, trans_ok, _ = self._allowed()
        m = self.label_map
        scores = np.where(trans_ok, self.log_transition[np.ix_(m, m)], NEG_INF)
        return _masked_log_softmax(scores)

    @property
    def terminal(self) -> np.ndarray:
        _, _, term_ok = self._allowed()
        return np.where(term_ok, 0.0, NEG_INF)

    @property
    def expanded_durations(self) -> np.ndarray:
        return self.durations[self.label_map]

    @property
    def expanded_means(self) -> np.ndarray:
        return self.means[self.label_map]


def _masked_log_softmax(scores: np.ndarray) -> np.ndarray:
    z = logsumexp(scores, axis=-1)
    z = np.where(np.isfinite(z), z, 0.0)
    if scores.ndim > 1:
        z = z[..., None]
    with np.errstate(invalid="ignore"):
        out = scores - z
    return np.where(np.isneginf(scores), NEG_INF, out)


# durations -----------------------------------------------------------------


def poisson_log_table(lam: np.ndarray, support: int) -> np.ndarray:
    """Log truncated-Poisson pmf, shape (n, support), column d-1 for d."""
    lam = np.asarray(lam, dtype=np.float64)
    d = np.arange(1, support + 1, dtype=np.float64)
    raw = d[None, :] * np.log(lam)[:, None] - lam[:, None] - gammaln(d + 1)[None, :]
    return raw - logsumexp(raw, axis=1)[:, None]


def _log_tail(table: np.ndarray) -> np.ndarray:
    """log P(D >= d) from a log pmf table."""
    rev = np.logaddexp.accumulate(table[:, ::-1], axis=1)
    return rev[:, ::-1]


def duration_tables(params: ModelParams, T: int) -> tuple[np.ndarray, np.ndarray]:
    """(regular, final-region) log duration tables over expanded labels."""
    support = params.duration_support(T)
    table = poisson_log_table(params.expanded_durations, support)
    final = _log_tail(table) if params.final_duration == "survival" else table
    return table, final


def duration_log_pmf(params: ModelParams, label: int, d: int, T: int | None = None) -> float:
    """log P(duration = d | label) for a *base* label."""
    support = params.duration_support(T)
    if not 1 <= d <= support:
        raise ValidationError(f"duration {d} outside support 1..{support}")
    return float(poisson_log_table(params.durations[[label]], support)[0, d - 1])


# emissions -----------------------------------------------------------------


def emission_log_prob(params: ModelParams, x: np.ndarray, label: int) -> float:
    """Diagonal-Gaussian log density of ``x`` under a *base* label."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.n_features,):
        raise ValidationError(f"feature vector has shape {x.shape}, expected ({params.n_features},)")
    diff = x - params.means[label]
    var = params.variances
    return float(-0.5 * (np.sum(np.log(var)) + x.size * LOG_2PI + np.sum(diff * diff / var)))


def emission_matrix(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """(T, n_labels) log densities over expanded labels."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.n_features:
        raise ValidationError(
            f"features have shape {X.shape}, model expects {params.n_features} dims"
        )
    var = params.variances
    inv = 1.0 / var
    mu = params.means
    quad = np.einsum("tlf,f->tl", (X[:, None, :] - mu[None, :, :]) ** 2, inv)
    base = -0.5 * (np.sum(np.log(var)) + X.shape[1] * LOG_2PI + quad)
    return base[:, params.label_map]


# lattice -------------------------------------------------------------------


@dataclass
class Lattice:
    """Segment scores ``seg[s, d-1, l]`` for a region of label l on [s, s+d)."""

    init: np.ndarray
    trans: np.ndarray
    term: np.ndarray
    seg: np.ndarray
    emissions: np.ndarray
    T: int
    D: int

    @property
    def n(self) -> int:
        return self.init.shape[0]


def build_lattice(params: ModelParams, features: np.ndarray, mask: EmissionMask | None = None) -> Lattice:
    emissions = emission_matrix(params, features)
    T, n = emissions.shape
    if T < 1:
        raise ValidationError("video must have at least one timestep")
    table, final = duration_tables(params, T)
    D = min(table.shape[1], T)
    cum = np.zeros((T + 1, n))
    np.cumsum(emissions, axis=0, out=cum[1:])
    s = np.arange(T)[:, None]
    e = s + np.arange(1, D + 1)[None, :]
    valid = e <= T
    e_c = np.minimum(e, T)
    seg = cum[e_c] - cum[s]
    if mask is not None:
        if mask.allowed.shape != (T, n):
            raise ValidationError(f"mask shape {mask.allowed.shape} does not match lattice ({T}, {n})")
        mcum = np.zeros((T + 1, n))
        np.cumsum(~np.asarray(mask.allowed, bool), axis=0, out=mcum[1:])
        count = mcum[e_c] - mcum[s]
        with np.errstate(invalid="ignore"):
            seg = seg + np.where(count > 0, mask.penalty * count, 0.0)
    dur = np.where((e == T)[:, :, None], final[:, :D].T[None], table[:, :D].T[None])
    seg = seg + dur
    seg[~valid] = NEG_INF
    return Lattice(params.initial, params.transition, params.terminal, seg, emissions, T, D)


def _forward(lat: Lattice):
    T, D, n = lat.T, lat.D, lat.n
    astart = np.full((T, n), NEG_INF)
    alpha = np.full((T + 1, n), NEG_INF)
    astart[0] = lat.init
    for t in range(1, T + 1):
        ds = np.arange(1, min(D, t) + 1)
        cand = astart[t - ds] + lat.seg[t - ds, ds - 1]
        alpha[t] = logsumexp(cand, axis=0)
        if t < T:
            astart[t] = logsumexp(alpha[t][:, None] + lat.trans, axis=0)
    log_z = float(logsumexp(alpha[T] + lat.term))
    return astart, alpha, log_z


def _backward(lat: Lattice):
    T, D, n = lat.T, lat.D, lat.n
    bend = np.full((T + 1, n), NEG_INF)
    bstart = np.full((T, n), NEG_INF)
    bend[T] = lat.term
    for t in range(T - 1, -1, -1):
        ds = np.arange(1, min(D, T - t) + 1)
        bstart[t] = logsumexp(lat.seg[t, ds - 1] + bend[t + ds], axis=0)
        if t > 0:
            bend[t] = logsumexp(lat.trans + bstart[t][None, :], axis=1)
    return bstart, bend


def forward_log_marginal(
    params: ModelParams, features: np.ndarray, mask: EmissionMask | None = None
) -> float:
    """log p(x) summed over every segmentation and labeling."""
    _, _, log_z = _forward(build_lattice(params, features, mask))
    if not np.isfinite(log_z):
        warnings.warn("no valid segmentation under the model's constraints", NoValidPathWarning, stacklevel=2)
    return log_z


@dataclass
class SegmentStats:
    """(Expected) sufficient statistics over expanded labels for one video."""

    init: np.ndarray  # (n,)
    trans: np.ndarray  # (n, n)
    dur: np.ndarray  # (n, D) regions not ending at T
    dur_final: np.ndarray  # (n, D) regions ending at T
    occupancy: np.ndarray  # (T, n)

    def __sub__(self, other: "SegmentStats") -> "SegmentStats":
        D = max(self.dur.shape[1], other.dur.shape[1])
        pad = lambda a: np.pad(a, ((0, 0), (0, D - a.shape[1])))
        return SegmentStats(
            self.init - other.init,
            self.trans - other.trans,
            pad(self.dur) - pad(other.dur),
            pad(self.dur_final) - pad(other.dur_final),
            self.occupancy - other.occupancy,
        )


def posterior_stats(
    params: ModelParams, features: np.ndarray, mask: EmissionMask | None = None
) -> tuple[float, SegmentStats]:
    """Forward-backward: log p(x) and expected segment statistics."""
    lat = build_lattice(params, features, mask)
    astart, alpha, log_z = _forward(lat)
    if not np.isfinite(log_z):
        raise NoValidPathError("no valid segmentation; cannot compute posteriors")
    bstart, bend = _backward(lat)
    T, D, n = lat.T, lat.D, lat.n
    s = np.arange(T)[:, None]
    e = np.minimum(s + np.arange(1, D + 1)[None, :], T)
    with np.errstate(invalid="ignore"):
        logp = astart[:, None, :] + lat.seg + bend[e] - log_z
    post = np.exp(np.where(np.isnan(logp), NEG_INF, logp))  # (T, D, n)
    ends_at_T = (s + np.arange(1, D + 1)[None, :]) == T
    dur_final = np.einsum("sdl,sd->ld", post, ends_at_T.astype(float))
    dur = post.sum(axis=0).T - dur_final
    diff = np.zeros((T + 1, n))
    np.add.at(diff, np.broadcast_to(s, e.shape), post)
    np.add.at(diff, e, -post)
    occupancy = np.cumsum(diff, axis=0)[:T]
    init = np.exp(lat.init + bstart[0] - log_z)
    init = np.nan_to_num(init)
    if T > 1:
        with np.errstate(invalid="ignore"):
            lt = alpha[1:T, :, None] + lat.trans[None] + bstart[1:T, None, :] - log_z
        trans = np.exp(np.where(np.isnan(lt), NEG_INF, lt)).sum(axis=0)
    else:
        trans = np.zeros((n, n))
    return log_z, SegmentStats(init, trans, dur, dur_final, occupancy)


def segmentation_stats(seg: Segmentation, n: int, D: int) -> SegmentStats:
    """One-hot statistics of a fixed segmentation over (expanded) labels."""
    T = seg.T
    init = np.zeros(n)
    trans = np.zeros((n, n))
    dur = np.zeros((n, D))
    dur_final = np.zeros((n, D))
    init[seg.regions[0][0]] = 1.0
    for (a, _), (b, _) in zip(seg.regions, seg.regions[1:]):
        trans[a, b] += 1.0
    for k, (l, d) in enumerate(seg.regions):
        if d > D:
            raise ValidationError(f"region duration {d} exceeds D_max={D}")
        (dur_final if k == seg.K - 1 else dur)[l, d - 1] += 1.0
    occupancy = np.zeros((T, n))
    occupancy[np.arange(T), np.repeat(seg.labels, seg.durations)] = 1.0
    return SegmentStats(init, trans, dur, dur_final, occupancy)


def log_joint(
    params: ModelParams,
    seg: Segmentation,
    features: np.ndarray,
    mask: EmissionMask | None = None,
) -> float:
    """log p(segmentation, x). Labels are expanded-label indices."""
    X = np.asarray(features, dtype=np.float64)
    T = X.shape[0]
    if seg.T != T:
        raise ValidationError(f"segmentation covers {seg.T} timesteps, video has {T}")
    if any(not 0 <= l < params.n_labels for l in seg.labels):
        raise ValidationError("segmentation uses labels outside the model")
    init, trans, term = params.initial, params.transition, params.terminal
    table, final = duration_tables(params, T)
    support = table.shape[1]
    emissions = emission_matrix(params, X)
    labels = seg.labels
    score = init[labels[0]] + term[labels[-1]]
    for a, b in zip(labels, labels[1:]):
        score += trans[a, b]
    t = 0
    for k, (l, d) in enumerate(seg.regions):
        if d > support:
            return NEG_INF
        score += (final if k == seg.K - 1 else table)[l, d - 1]
        score += emissions[t : t + d, l].sum()
        if mask is not None:
            n_masked = int(np.sum(~np.asarray(mask.allowed[t : t + d, l], bool)))
            if n_masked:
                score += mask.penalty * n_masked
        t += d
    return float(score)


def viterbi_decode(
    params: ModelParams,
    features: np.ndarray,
    mask: EmissionMask | None = None,
    tie_tol: float = 1e-10,
) -> tuple[Segmentation, float]:
    """Highest-scoring segmentation (expanded labels) and its log joint.

    Backtracking walks regions from the end; among candidates within
    ``tie_tol`` (relative) of the optimum it takes the shorter duration, then
    the lower label.
    """
    lat = build_lattice(params, features, mask)
    T, D, n = lat.T, lat.D, lat.n
    vstart = np.full((T, n), NEG_INF)  # best prefix score with a region starting at t
    vstart[0] = lat.init
    valpha = np.full((T + 1, n), NEG_INF)
    for t in range(1, T + 1):
        ds = np.arange(1, min(D, t) + 1)
        valpha[t] = np.max(vstart[t - ds] + lat.seg[t - ds, ds - 1], axis=0)
        if t < T:
            vstart[t] = np.max(valpha[t][:, None] + lat.trans, axis=0)

    def pick(cand: np.ndarray) -> tuple[int, int, float]:
        best = np.max(cand)
        tol = tie_tol * max(1.0, abs(best)) if np.isfinite(best) else 0.0
        d_idx, label = np.argwhere(cand >= best - tol)[0]  # row-major: d first
        return int(d_idx) + 1, int(label), float(best)

    ds = np.arange(1, min(D, T) + 1)
    d, label, score = pick(vstart[T - ds] + lat.seg[T - ds, ds - 1] + lat.term[None, :])
    if not np.isfinite(score):
        raise NoValidPathError(
            f"no valid segmentation for T={T} under the model's constraints "
            f"({n} states, D_max={D})"
        )
    regions = [(label, d)]
    t = T - d
    while t > 0:
        ds = np.arange(1, min(D, t) + 1)
        cand = vstart[t - ds] + lat.seg[t - ds, ds - 1] + lat.trans[:, label][None, :]
        d, label, _ = pick(cand)
        regions.append((label, d))
        t -= d
    return Segmentation(tuple(reversed(regions))), score


def expected_occupancy(params: ModelParams, T: int) -> np.ndarray:
    """Prior marginal P(l_t = l) over expanded labels (features ignored)."""
    stats = _prior_stats(params, T)
    return stats.occupancy


def _prior_stats(params: ModelParams, T: int) -> SegmentStats:
    flat = replace(
        params,
        means=np.zeros((params.n_base, 1)),
        variances=np.ones(1),
    )
    return posterior_stats(flat, np.zeros((T, 1)))[1]


def sampled_occupancy(params: ModelParams, T: int) -> np.ndarray:
    """Exact P(l_t = l) under ``sample``'s ancestral process.

    Unlike ``expected_occupancy`` this follows the sampler: the last region
    is cut at T, terminal sets are ignored and absorbing labels stretch to
    the end.
    """
    trans = np.exp(params.transition)
    init = np.exp(params.initial)
    table, _ = duration_tables(params, T)
    pmf = np.exp(table)
    pmf /= pmf.sum(axis=1, keepdims=True)
    n, D = pmf.shape
    row_sum = trans.sum(axis=1)
    absorbing = row_sum <= 0
    trans = np.where(absorbing[:, None], 0.0, trans / np.where(absorbing, 1.0, row_sum)[:, None])
    d = np.arange(1, D + 1)
    start = np.zeros((T + D + 1, n))
    start[0] = init / init.sum()
    # +mass at a region's first frame, -mass one past its last
    diff = np.zeros((T + 1, n))
    for t in range(T):
        m = start[t]
        if not m.any():
            continue
        diff[t] += m
        w = m[:, None] * pmf  # (n, D)
        w[absorbing] = 0.0
        ends = np.minimum(t + d, T)
        np.add.at(diff, (np.broadcast_to(ends, w.shape).T, np.arange(n)[None, :]), -w.T)
        diff[T, absorbing] -= m[absorbing]
        nxt = w.T @ trans  # (D, n): next region starts at t + d
        start[t + 1 : t + D + 1] += nxt
    return np.cumsum(diff, axis=0)[:T]


def sample(
    params: ModelParams, T: int, seed: int | np.random.Generator | None = None
) -> tuple[Segmentation, np.ndarray]:
    """Ancestral sample of regions and features; the last region is cut at T."""
    rng = np.random.default_rng(seed)
    if T < 1:
        raise ValidationError("T must be >= 1")
    init = np.exp(params.initial)
    trans = np.exp(params.transition)
    table, _ = duration_tables(params, T)
    pmf = np.exp(table)
    n = params.n_labels
    regions = []
    total = 0
    label = int(rng.choice(n, p=init / init.sum()))
    while True:
        d = int(rng.choice(pmf.shape[1], p=pmf[label] / pmf[label].sum())) + 1
        d = min(d, T - total)
        regions.append((label, d))
        total += d
        if total >= T:
            break
        row = trans[label]
        if row.sum() <= 0:
            # absorbing state: stretch the final region to the end
            regions[-1] = (label, regions[-1][1] + T - total)
            break
        label = int(rng.choice(n, p=row / row.sum()))
    seg = Segmentation(tuple(regions))
    frames = np.repeat(seg.labels, seg.durations)
    mu = params.expanded_means[frames]
    X = mu + rng.standard_normal(mu.shape) * np.sqrt(params.variances)[None, :]
    return seg, X


def base_labels(params: ModelParams, seg: Segmentation) -> Segmentation:
    """Map expanded labels to base model labels, merging equal neighbours."""
    from .core import frames_to_segmentation, segmentation_to_frames

    frames = params.label_map[segmentation_to_frames(seg)]
    return frames_to_segmentation(frames)


def to_task_labels(frames: np.ndarray, n_steps: int) -> np.ndarray:
    """Base model labels (background = n_steps) to task labels (background = -1)."""
    frames = np.asarray(frames, dtype=np.int64)
    return np.where(frames == n_steps, BACKGROUND, frames)


def from_task_labels(frames: np.ndarray, n_steps: int) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.int64)
    return np.where(frames == BACKGROUND, n_steps, frames)
