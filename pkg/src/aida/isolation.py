"""Closed-form isolation statistics over a sorted 1D vector.

The isolation process repeatedly splits the current interval set at a random
gap, with probability proportional to ``gap ** alpha``, and keeps the piece
containing the left-most point until that point is alone. ``h`` is the number
of splits. Its mgf, mean and variance have closed forms in terms of the gap
ratios ``q_i = g_i / G_{i+1}`` where ``G_{i+1}`` is the cumulative gap weight
up to and including gap ``i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

EXPECTATION = "expectation"
VARIANCE = "variance"
SCORE_FUNCTIONS = (EXPECTATION, VARIANCE)

# Per-duplicate increments: the largest contribution a single point can add
# to the mean / variance of the split count.
DUPLICATE_PENALTY = {EXPECTATION: 1.0, VARIANCE: 0.25}

_TINY_GAP = 1e-300


@dataclass(frozen=True)
class ScoreConfig:
    """Score function and gap-weight exponent.

    ``alpha_range`` switches to per-subsample exponents drawn uniformly from
    the closed interval; ``alpha`` is then ignored by the detector.
    """

    score_fn: str = VARIANCE
    alpha: float = 1.0
    alpha_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.score_fn not in SCORE_FUNCTIONS:
            raise ValueError(f"score_fn must be one of {SCORE_FUNCTIONS}, got {self.score_fn!r}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.alpha_range is not None:
            lo, hi = self.alpha_range
            if not (0 < lo <= hi):
                raise ValueError(f"alpha_range must satisfy 0 < min <= max, got {self.alpha_range}")


@dataclass(frozen=True)
class SplitStats:
    mean: float
    variance: float
    trials: int = 0


@dataclass(frozen=True)
class IsolationScore:
    score: float
    statistic: float
    duplicates: int
    degenerate: bool


def _check_sorted(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise ValueError("need a 1D vector with at least 2 entries")
    if not np.all(np.isfinite(z)):
        raise ValueError("vector contains non-finite values")
    if np.any(np.diff(z) <= 0):
        raise ValueError("vector must be strictly increasing")
    return z


def gap_weights(z: np.ndarray, alpha: float) -> np.ndarray:
    """``(z[i+1] - z[i]) ** alpha`` with sub-1e-300 gaps clamped to zero."""
    g = np.diff(z)
    g[g < _TINY_GAP] = 0.0
    if alpha != 1.0:
        g = g**alpha
    return g


def _ratios(z, alpha):
    g = gap_weights(z, alpha)
    G = np.cumsum(g)
    return g / G


def split_mgf(z, u: float, alpha: float = 1.0) -> float:
    """Moment generating function ``E[exp(u h)]`` of the split count.

    Evaluated as ``prod_i (1 + (e^u - 1) q_i)``, which is the same product
    written so that every factor is computed via ``log1p``/``expm1``.
    """
    z = _check_sorted(z)
    q = _ratios(z, alpha)
    return float(np.exp(np.sum(np.log1p(np.expm1(u) * q))))


def split_cgf(z, u: float, alpha: float = 1.0) -> float:
    """Log of :func:`split_mgf`."""
    z = _check_sorted(z)
    q = _ratios(z, alpha)
    return float(np.sum(np.log1p(np.expm1(u) * q)))


def expected_splits(z, alpha: float = 1.0) -> float:
    z = _check_sorted(z)
    q = _ratios(z, alpha)
    return float(1.0 + q[1:].sum())


def variance_splits(z, alpha: float = 1.0) -> float:
    z = _check_sorted(z)
    q = _ratios(z, alpha)[1:]
    return float(np.sum(q * (1.0 - q)))


def profile_statistics(distances: np.ndarray, alpha: float = 1.0, score_fn: str = VARIANCE):
    """Isolation statistic for rows of sorted distances, penalty included.

    ``distances`` holds sorted non-negative distances to the subsample,
    *without* the query's own leading zero; shape ``(..., psi)``. Leading
    zeros are duplicates of the query. Working on the unstripped vector is
    equivalent to stripping them: gaps before the first nonzero entry have
    ``G = 0`` and are skipped, and the first gap with ``G > 0`` has ratio 1,
    which supplies the ``1 +`` of the mean and a zero variance term.

    Returns ``(statistic, duplicate_count)`` with the statistic already
    including ``duplicate_count * penalty``.
    """
    d = np.asarray(distances, dtype=np.float64)
    # plain ufunc calls: this runs once per candidate in the explainer's inner loop
    g = np.empty_like(d)
    g[..., 0] = d[..., 0]
    np.subtract(d[..., 1:], d[..., :-1], out=g[..., 1:])
    g[g < _TINY_GAP] = 0.0
    if alpha != 1.0:
        g **= alpha
    G = g.cumsum(axis=-1)
    # G is 0 only where every gap so far is 0, so g is 0 there too and q = 0
    G[G == 0.0] = 1.0
    q = np.divide(g, G, out=g)
    dups = (d == 0.0).sum(axis=-1)
    if score_fn == VARIANCE:
        stat = (q * (1.0 - q)).sum(axis=-1)
    elif score_fn == EXPECTATION:
        stat = q.sum(axis=-1)
    else:
        raise ValueError(f"unknown score function {score_fn!r}")
    return stat + DUPLICATE_PENALTY[score_fn] * dups, dups


def isolation_score(profile, cfg: ScoreConfig | None = None, alpha: float | None = None) -> IsolationScore:
    """Outlier score of a distance profile: the negated isolation statistic.

    ``profile`` is either a :class:`aida.metric.DistanceProfile` or a sorted
    vector starting with the query's own zero.
    """
    cfg = cfg or ScoreConfig()
    a = cfg.alpha if alpha is None else alpha
    z = np.asarray(getattr(profile, "distances", profile), dtype=np.float64)
    if z.ndim != 1 or z.size < 1 or z[0] != 0.0:
        raise ValueError("profile must be a 1D vector starting at 0")
    if np.any(np.diff(z) < 0) or np.any(z < 0):
        raise ValueError("profile must be sorted and non-negative")
    rest = z[1:]
    if rest.size == 0:
        return IsolationScore(score=-0.0, statistic=0.0, duplicates=0, degenerate=True)
    stat, dups = profile_statistics(rest, a, cfg.score_fn)
    dups = int(dups)
    degenerate = dups == rest.size
    if degenerate:
        logger.debug("all-duplicate profile of length %d", z.size)
    return IsolationScore(score=-float(stat), statistic=float(stat), duplicates=dups, degenerate=degenerate)


def simulate_splits(z, alpha: float = 1.0, trials: int = 100_000, seed=None) -> SplitStats:
    """Monte Carlo estimate of the split-count mean and variance.

    Each trial draws a gap inside the current piece with probability
    proportional to its weight, keeps the piece holding ``z[0]`` and counts
    splits until ``z[0]`` is alone.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    z = _check_sorted(z)
    rng = np.random.default_rng(seed)
    g = gap_weights(z, alpha)
    cum = np.concatenate([[0.0], np.cumsum(g)])
    # m = index of the right-most point still in the piece
    m = np.full(trials, z.size - 1, dtype=np.int64)
    h = np.zeros(trials, dtype=np.int64)
    active = np.arange(trials)
    while active.size:
        target = rng.random(active.size) * cum[m[active]]
        cut = np.searchsorted(cum, target, side="right") - 1
        # guard the measure-zero case target == cum[m]
        cut = np.minimum(cut, m[active] - 1)
        m[active] = cut
        h[active] += 1
        active = active[cut > 0]
    var = float(h.var(ddof=1)) if trials > 1 else 0.0
    return SplitStats(mean=float(h.mean()), variance=var, trials=trials)
