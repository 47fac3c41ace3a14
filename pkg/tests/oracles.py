"""Independent reference implementations used as test oracles.

Nothing here calls the package's dynamic programs; scoring goes through
scipy.stats and plain enumeration.
"""
from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from stepseg.core import Segmentation
from stepseg.model import ModelParams


def random_params(rng, n, F=2, D=None, lam=(0.5, 4.0)):
    return ModelParams(
        np.log(rng.dirichlet(np.ones(n))),
        np.log(rng.dirichlet(np.ones(n), size=n)),
        rng.uniform(*lam, n),
        rng.normal(size=(n, F)),
        rng.uniform(0.5, 2.0, F),
        max_duration=D,
    )


def compositions(T, D):
    if T == 0:
        yield ()
        return
    for d in range(1, min(D, T) + 1):
        for rest in compositions(T - d, D):
            yield (d,) + rest


def all_segmentations(T, n, D):
    for durs in compositions(T, D):
        for labels in itertools.product(range(n), repeat=len(durs)):
            yield Segmentation(tuple(zip(labels, durs)))


def truncated_poisson_logpmf(d, lam, D):
    support = np.arange(1, D + 1)
    return np.log(stats.poisson.pmf(d, lam) / stats.poisson.pmf(support, lam).sum())


def brute_log_joint(p: ModelParams, seg: Segmentation, X, D, init=None, trans=None, term=None,
                    means=None, lams=None):
    """log P(seg, X) scored region by region; structure defaults to the
    base parameters (no expanded space)."""
    init = p.log_initial if init is None else init
    trans = p.log_transition if trans is None else trans
    means = p.means if means is None else means
    lams = p.durations if lams is None else lams
    sd = np.sqrt(p.variances)
    labels = seg.labels
    score = init[labels[0]]
    for a, b in zip(labels, labels[1:]):
        score += trans[a, b]
    if term is not None:
        score += term[labels[-1]]
    t = 0
    for l, d in seg.regions:
        score += truncated_poisson_logpmf(d, lams[l], D)
        score += stats.norm.logpdf(X[t : t + d], means[l], sd).sum()
        t += d
    return float(score)


def brute_force(p: ModelParams, X, D, n=None, **structure):
    """(log marginal, argmax segmentation under the declared tie rule, max score)."""
    T = X.shape[0]
    n = p.n_base if n is None else n
    scored = [(brute_log_joint(p, s, X, D, **structure), s) for s in all_segmentations(T, n, D)]
    vals = np.array([v for v, _ in scored])
    log_z = float(logsumexp(vals)) if np.isfinite(vals).any() else -np.inf
    m = float(vals.max())
    ties = [s for v, s in scored if v >= m - 1e-9 * max(1.0, abs(m))]
    # walking back from the end: shorter duration first, then lower label
    best = min(ties, key=lambda s: tuple((d, l) for l, d in reversed(s.regions)))
    return log_z, best, m


def hmm_forward(log_pi, log_A, log_B):
    """Textbook per-timestep forward recursion; log_B is T x n."""
    alpha = log_pi + log_B[0]
    for t in range(1, log_B.shape[0]):
        alpha = logsumexp(alpha[:, None] + log_A, axis=0) + log_B[t]
    return float(logsumexp(alpha))


def hmm_viterbi(log_pi, log_A, log_B):
    T, n = log_B.shape
    delta = log_pi + log_B[0]
    back = np.zeros((T, n), dtype=int)
    for t in range(1, T):
        cand = delta[:, None] + log_A
        back[t] = cand.argmax(axis=0)
        delta = cand.max(axis=0) + log_B[t]
    path = [int(delta.argmax())]
    for t in range(T - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    return path[::-1], float(delta.max())


def gaussian_emissions(p: ModelParams, X):
    sd = np.sqrt(p.variances)
    return np.stack([stats.norm.logpdf(X, p.means[l], sd).sum(axis=1) for l in range(p.n_base)], axis=1)


def edit_distance(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(rec(i - 1, j) + 1, rec(i, j - 1) + 1, rec(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return rec(len(a), len(b))


def best_permutation_total(m):
    n = m.shape[0]
    return max(sum(m[i, s[i]] for i in range(n)) for s in itertools.permutations(range(n)))


def ordered_scan(labels, n_steps, background=-1):
    """Region labels contain 0..S-1 exactly once each, ascending."""
    seen = [l for l in labels if l != background]
    if len(seen) != n_steps:
        return False
    return all(seen[i] == i for i in range(n_steps))


def brute_force_vectorized(p: ModelParams, X, D):
    """Same enumeration as ``brute_force`` (base structure only), with all
    labelings of one duration composition scored at once."""
    T = X.shape[0]
    n = p.n_base
    sd = np.sqrt(p.variances)
    frame = np.stack([stats.norm.logpdf(X, p.means[l], sd).sum(axis=1) for l in range(n)], axis=1)
    dur = np.stack([truncated_poisson_logpmf(np.arange(1, D + 1), p.durations[l], D) for l in range(n)])
    scores, blocks = [], []
    for durs in compositions(T, D):
        K = len(durs)
        labels = np.array(list(itertools.product(range(n), repeat=K)), dtype=int).reshape(-1, K)
        s = p.log_initial[labels[:, 0]].copy()
        if K > 1:
            s += p.log_transition[labels[:, :-1], labels[:, 1:]].sum(axis=1)
        t = 0
        for k, d in enumerate(durs):
            s += frame[t : t + d].sum(axis=0)[labels[:, k]] + dur[labels[:, k], d - 1]
            t += d
        scores.append(s)
        blocks.append((durs, labels))
    m = float(max(s.max() for s in scores))
    ties = [
        Segmentation(tuple(zip(labels[i].tolist(), durs)))
        for s, (durs, labels) in zip(scores, blocks)
        for i in np.flatnonzero(s >= m - 1e-9 * max(1.0, abs(m)))
    ]
    vals = np.concatenate(scores)
    best = min(ties, key=lambda s: tuple((d, l) for l, d in reversed(s.regions)))
    return float(logsumexp(vals)), best, m
