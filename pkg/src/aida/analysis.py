"""Chance that random-split trees ever look at a given feature subspace.

An isolation tree of depth ``h`` picks one feature uniformly at random per
level. A point hidden in an ``r``-feature subspace can only be isolated by a
path that has drawn every one of those ``r`` features. ``p(r, h)`` is the
probability that ``h`` uniform draws out of ``d`` features cover ``r``
designated features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SubspaceQuery:
    d: int
    r: int
    h_M: int

    def __post_init__(self):
        if not (1 <= self.r <= self.d):
            raise ValueError(f"need 1 <= r <= d, got r={self.r}, d={self.d}")
        if self.h_M < 1:
            raise ValueError(f"h_M must be >= 1, got {self.h_M}")


def coverage_table(d: int, r_max: int, h_max: int) -> np.ndarray:
    """``P[r, h]`` for ``0 <= r <= r_max``, ``0 <= h <= h_max``, filled bottom-up.

    The first draw that hits any of the ``r`` outstanding features happens at
    step ``i`` with probability ``(r/d) (1 - r/d)**(i-1)``; the remaining
    ``r - 1`` features must then be covered in ``h - i`` draws.
    """
    P = np.zeros((r_max + 1, h_max + 1))
    P[0, :] = 1.0
    h = np.arange(h_max + 1)
    if r_max >= 1:
        P[1] = 1.0 - (1.0 - 1.0 / d) ** h
    for r in range(2, r_max + 1):
        a = r / d
        first = a * (1.0 - a) ** np.arange(h_max)  # first[i-1] = P(first hit at draw i)
        for hh in range(1, h_max + 1):
            # sum_{i=1}^{hh} first[i-1] * P[r-1, hh-i]
            P[r, hh] = np.dot(first[:hh], P[r - 1, hh - 1 :: -1][:hh])
    return np.clip(P, 0.0, 1.0)


def hidden_subspace_probability(q: SubspaceQuery) -> float:
    return float(coverage_table(q.d, q.r, q.h_M)[q.r, q.h_M])


def simulate_subspace_hit(q: SubspaceQuery, trials: int = 100_000, seed=None) -> float:
    """Fraction of trials in which ``h_M`` uniform feature draws include features ``0..r-1``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    draws = rng.integers(q.d, size=(trials, q.h_M))
    hit = np.ones(trials, dtype=bool)
    for j in range(q.r):
        hit &= (draws == j).any(axis=1)
    return float(hit.mean())


def decay_rate_check(r: int, h_M: int, d_list) -> list[tuple[int, float]]:
    """``(d, p(r, h_M) * d**r)`` for each ``d``; the products level off as ``d`` grows."""
    d_list = [int(d) for d in d_list]
    if any(b <= a for a, b in zip(d_list, d_list[1:])):
        raise ValueError("d_list must be increasing")
    if any(d < r for d in d_list):
        raise ValueError("every d must be >= r")
    return [(d, hidden_subspace_probability(SubspaceQuery(d, r, h_M)) * float(d) ** r) for d in d_list]


def probability_grid(d_values, r_values, h_values) -> list[tuple[int, int, int, float]]:
    """Rows ``(d, r, h_M, p)`` for every valid combination."""
    rows = []
    for d in d_values:
        for r in r_values:
            if r > d:
                continue
            table = coverage_table(d, r, max(h_values))
            rows.extend((d, r, h, float(table[r, h])) for h in h_values)
    return rows
