"""Independent reference computations used across the test modules."""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def split_moments_by_recursion(z, alpha=1.0):
    """Mean and variance of the split count by recursion over the right end of the piece.

    From a piece holding points ``0..m`` a cut lands in gap ``i < m`` with
    probability ``w_i / sum_{t<m} w_t`` and leaves points ``0..i``.
    """
    z = np.asarray(z, dtype=np.float64)
    w = np.diff(z) ** alpha
    n = z.size
    m1 = np.zeros(n)
    m2 = np.zeros(n)
    for m in range(1, n):
        p = w[:m] / w[:m].sum()
        m1[m] = 1.0 + np.dot(p, m1[:m])
        m2[m] = np.dot(p, 1.0 + 2.0 * m1[:m] + m2[:m])
    mean = m1[-1]
    return mean, m2[-1] - mean**2


def split_moments_exact(z):
    """Same recursion in exact rational arithmetic (integer-valued ``z``, alpha = 1)."""
    z = [Fraction(v) for v in z]
    w = [b - a for a, b in zip(z, z[1:])]
    n = len(z)
    m1 = [Fraction(0)] * n
    m2 = [Fraction(0)] * n
    for m in range(1, n):
        tot = sum(w[:m])
        m1[m] = 1 + sum(w[i] / tot * m1[i] for i in range(m))
        m2[m] = sum(w[i] / tot * (1 + 2 * m1[i] + m2[i]) for i in range(m))
    return m1[-1], m2[-1] - m1[-1] ** 2


def split_pmf_by_enumeration(z, alpha=1.0):
    """Full distribution of the split count: dict h -> probability."""
    z = np.asarray(z, dtype=np.float64)
    w = np.diff(z) ** alpha
    n = z.size
    dist = [dict() for _ in range(n)]
    dist[0] = {0: 1.0}
    for m in range(1, n):
        p = w[:m] / w[:m].sum()
        out: dict[int, float] = {}
        for i in range(m):
            for h, ph in dist[i].items():
                out[h + 1] = out.get(h + 1, 0.0) + p[i] * ph
        dist[m] = out
    return dist[-1]


def pairwise_auc(scores, labels):
    """AUC by comparing every outlier/inlier pair, ties count one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def coverage_probability_by_inclusion_exclusion(d, r, h):
    """P(h uniform draws from d features include r given features)."""
    return sum((-1) ** s * math.comb(r, s) * (1 - s / d) ** h for s in range(r + 1))


def tix_run_by_recomputation(qn, Yn, L, T, greedy, rng, score_fn="variance", alpha=1.0, p=1.0):
    """One explainer run that rescans the whole feature set at every proposal.

    Draws from ``rng`` in the same order as a lazy runner that never batches:
    candidate index, then a uniform only when the removal makes the score worse.
    """
    from aida.isolation import ScoreConfig, isolation_score
    from aida.metric import MetricConfig, distance_profile

    def score(active):
        prof = distance_profile(qn, Yn, cfg=MetricConfig(p=p, active=tuple(active)))
        return isolation_score(prof, ScoreConfig(score_fn=score_fn), alpha=alpha).score

    d = len(qn)
    J = list(range(d))
    path = [0] * d
    f = score(J)
    l = 0
    while l < L and len(J) > 1:
        j = J[int(rng.integers(len(J)))]
        rest = [a for a in J if a != j]
        f_new = score(rest)
        if f_new >= f:
            accept = True
        elif greedy:
            accept = False
        else:
            accept = math.exp((f_new - f) / (abs(f) * T)) > rng.random()
        if accept:
            J, f = rest, f_new
            path[j] = l
        l += 1
    for j in J:
        path[j] = l
    return path


def reciprocal_similarity_distance(s):
    """Distance from similarity under ``S = 1 / (1 + dist)``, the older map the metric does not use."""
    return 1.0 / s - 1.0
