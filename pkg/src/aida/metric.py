"""Distances for numeric, nominal and mixed rows.

Feature indices follow the dataset layout: ``0 .. d_num-1`` are numeric,
``d_num .. d_num+d_nom-1`` are nominal.

Numeric part: weighted Lp, ``(sum_l w_l |x_l - y_l|**p) ** (1/p)``.
Nominal part: ``-sum_l w_l log S_l(x_l, y_l)`` with the frequency-based
similarity of :func:`nominal_similarity`. The total distance is their sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from aida.dataset import FrequencyTable


@dataclass(frozen=True)
class MetricConfig:
    """Exponent, per-feature weights and active feature set.

    ``weights_num``/``weights_nom`` default to ones; ``active`` defaults to all
    features. Weights are stored as tuples so configs stay hashable.
    """

    p: float = 1.0
    weights_num: tuple[float, ...] | None = None
    weights_nom: tuple[float, ...] | None = None
    active: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError(f"p must be positive, got {self.p}")
        for name in ("weights_num", "weights_nom"):
            w = getattr(self, name)
            if w is not None:
                w = tuple(float(v) for v in w)
                if any(not v >= 0 for v in w):
                    raise ValueError(f"{name} must be non-negative")
                object.__setattr__(self, name, w)
        if self.active is not None:
            act = tuple(sorted(set(int(j) for j in self.active)))
            if not act:
                raise ValueError("active feature set must be non-empty")
            object.__setattr__(self, "active", act)

    def with_active(self, active) -> "MetricConfig":
        return MetricConfig(p=self.p, weights_num=self.weights_num, weights_nom=self.weights_nom, active=tuple(active))

    def resolve(self, d_num: int, d_nom: int):
        """Return (numeric weights, nominal weights) with inactive features zeroed."""
        wn = np.ones(d_num) if self.weights_num is None else np.asarray(self.weights_num, dtype=np.float64)
        wc = np.ones(d_nom) if self.weights_nom is None else np.asarray(self.weights_nom, dtype=np.float64)
        if wn.size != d_num or wc.size != d_nom:
            raise ValueError(f"weights do not match schema ({d_num} numeric, {d_nom} nominal)")
        if self.active is not None:
            if self.active[-1] >= d_num + d_nom or self.active[0] < 0:
                raise ValueError("active feature index out of range")
            mask = np.zeros(d_num + d_nom, dtype=bool)
            mask[list(self.active)] = True
            wn = np.where(mask[:d_num], wn, 0.0)
            wc = np.where(mask[d_num:], wc, 0.0)
        return wn, wc


@dataclass(frozen=True)
class DistanceProfile:
    """Sorted distances from a query to a subsample, led by the self-distance 0."""

    distances: np.ndarray
    duplicate_count: int = field(default=0)

    @classmethod
    def from_distances(cls, d) -> "DistanceProfile":
        d = np.sort(np.asarray(d, dtype=np.float64))
        return cls(np.concatenate([[0.0], d]), int(np.count_nonzero(d == 0.0)))


def lp_distance(x, y, cfg: MetricConfig | None = None) -> float:
    """Weighted Lp distance between two numeric rows over the active features."""
    cfg = cfg or MetricConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    w = np.ones(x.size) if cfg.weights_num is None else np.asarray(cfg.weights_num, dtype=np.float64)
    if w.size != x.size:
        raise ValueError("weights do not match row length")
    if cfg.active is not None:
        w = np.where(np.isin(np.arange(x.size), cfg.active), w, 0.0)
    s = float(np.sum(w * np.abs(x - y) ** cfg.p))
    return s if cfg.p == 1 else s ** (1.0 / cfg.p)


def mismatch_probability(counts: np.ndarray, n: int) -> np.ndarray:
    """``f (f - 1) / ((n + 1) n)``: chance of drawing the class twice, with the
    ``n + 1`` in the denominator keeping every similarity strictly positive."""
    counts = np.asarray(counts, dtype=np.float64)
    return counts * (counts - 1.0) / ((n + 1.0) * n)


def nominal_similarity(k: int, x: int, y: int, ft: FrequencyTable) -> float:
    """Similarity of classes ``x`` and ``y`` in nominal feature ``k``.

    Equal classes have similarity 1. On a mismatch the similarity is
    ``1 - max(p2(x), p2(y))`` where ``p2`` is :func:`mismatch_probability`;
    with the query class rare or unseen this is ``1 - p2(y)`` of the stored
    class. The max keeps the distance symmetric.
    """
    if x == y:
        return 1.0
    px = mismatch_probability(ft.count(k, x), ft.n_train)
    py = mismatch_probability(ft.count(k, y), ft.n_train)
    return float(1.0 - max(px, py))


def nominal_distance(x, y, ft: FrequencyTable, cfg: MetricConfig | None = None, d_num: int = 0) -> float:
    """``-sum_l w_l log S_l``. ``d_num`` offsets the active-set indices."""
    cfg = cfg or MetricConfig()
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    _, w = cfg.resolve(d_num, x.size)
    total = 0.0
    for k in range(x.size):
        if w[k] == 0.0 or x[k] == y[k]:
            continue
        total -= w[k] * np.log(nominal_similarity(k, int(x[k]), int(y[k]), ft))
    return float(total)


def total_distance(xi, xj, ft: FrequencyTable | None = None, cfg: MetricConfig | None = None) -> float:
    """Distance between two rows given as ``(numeric, nominal)`` pairs."""
    cfg = cfg or MetricConfig()
    xn, xc = _split_row(xi)
    yn, yc = _split_row(xj)
    d_num, d_nom = xn.size, xc.size
    wn, _ = cfg.resolve(d_num, d_nom)
    out = 0.0
    if d_num:
        if xn.shape != yn.shape:
            raise ValueError("dimension mismatch")
        s = float(np.sum(wn * np.abs(xn - yn) ** cfg.p))
        out += s if cfg.p == 1 else s ** (1.0 / cfg.p)
    if d_nom:
        if ft is None:
            raise ValueError("nominal features need a frequency table")
        out += nominal_distance(xc, yc, ft, cfg, d_num=d_num)
    return out


def _split_row(row):
    if isinstance(row, tuple) and len(row) == 2:
        num, nom = row
    else:
        num, nom = row, ()
    return np.asarray(num, dtype=np.float64).ravel(), np.asarray(nom, dtype=np.int64).ravel()


def _nominal_penalties(ft: FrequencyTable, k: int, classes: np.ndarray) -> np.ndarray:
    return mismatch_probability(ft.counts_for(k, classes), ft.n_train)


def pairwise_distances(Xn, Xc, Yn, Yc, ft: FrequencyTable | None, cfg: MetricConfig) -> np.ndarray:
    """Distance matrix between query rows ``X`` and subsample rows ``Y``.

    Numeric/nominal blocks may have zero columns. Result shape ``(len(X), len(Y))``.
    """
    Xn = np.asarray(Xn, dtype=np.float64)
    Yn = np.asarray(Yn, dtype=np.float64)
    n_x = Xn.shape[0] if Xn.ndim == 2 else np.asarray(Xc).shape[0]
    n_y = Yn.shape[0] if Yn.ndim == 2 else np.asarray(Yc).shape[0]
    d_num = Xn.shape[1] if Xn.ndim == 2 else 0
    d_nom = np.asarray(Xc).shape[1] if np.asarray(Xc).ndim == 2 else 0
    wn, wc = cfg.resolve(d_num, d_nom)
    cols = np.flatnonzero(wn)
    if cols.size:
        # column fancy-indexing returns Fortran-ordered arrays, which cdist handles slowly
        a, b, w = np.ascontiguousarray(Xn[:, cols]), np.ascontiguousarray(Yn[:, cols]), wn[cols]
        if cfg.p == 1 and np.all(w == 1.0):
            D = cdist(a, b, "cityblock")
        else:
            D = cdist(a, b, "minkowski", p=cfg.p, w=w)
    else:
        D = np.zeros((n_x, n_y))
    for k in np.flatnonzero(wc):
        xk = np.asarray(Xc[:, k], dtype=np.int64)
        yk = np.asarray(Yc[:, k], dtype=np.int64)
        pen = np.maximum(_nominal_penalties(ft, k, xk)[:, None], _nominal_penalties(ft, k, yk)[None, :])
        cost = -wc[k] * np.log1p(-pen)
        D += np.where(xk[:, None] != yk[None, :], cost, 0.0)
    return D


def distance_profile(query, subsample, ft: FrequencyTable | None = None, cfg: MetricConfig | None = None) -> DistanceProfile:
    """Profile of one query against a subsample.

    ``query`` is ``(numeric, nominal)`` or a numeric row; ``subsample`` is
    ``(numeric matrix, nominal matrix)`` or a numeric matrix.
    """
    cfg = cfg or MetricConfig()
    qn, qc = _split_row(query)
    if isinstance(subsample, tuple):
        Yn, Yc = subsample
    else:
        Yn, Yc = subsample, None
    Yn = np.asarray(Yn, dtype=np.float64)
    n_y = Yn.shape[0] if Yn.size or Yc is None else np.asarray(Yc).shape[0]
    if n_y == 0:
        raise ValueError("subsample is empty")
    Yn = Yn.reshape(n_y, qn.size)
    Yc = np.zeros((n_y, 0), dtype=np.int64) if Yc is None else np.asarray(Yc, dtype=np.int64).reshape(n_y, qc.size)
    d = pairwise_distances(qn[None, :], qc[None, :], Yn, Yc, ft, cfg)[0]
    return DistanceProfile.from_distances(d)


def combine_terms(s_num, s_nom, nz, p: float = 1.0) -> np.ndarray:
    """Distances from summed numeric/nominal terms; any shape, broadcast together.

    Entries whose count of nonzero terms ``nz`` is 0 are exact duplicates and
    come out as exact zeros.
    """
    d = s_num if p == 1 else np.maximum(s_num, 0.0) ** (1.0 / p)
    d = d + s_nom
    d[nz == 0] = 0.0
    np.maximum(d, 0.0, out=d)
    return d


class ContributionCache:
    """Per-point, per-feature additive distance terms for one query.

    Numeric columns hold ``w |x - y|**p``, nominal columns ``-w log S``.
    Distances over the active set are ``S_num ** (1/p) + S_nom``. Removing a
    feature subtracts its column in O(psi); a per-point count of nonzero
    active terms makes exact duplicates come out as exact zeros despite
    rounding in the running sums.
    """

    def __init__(self, terms: np.ndarray, d_num: int, p: float = 1.0, active=None):
        self.terms = np.ascontiguousarray(np.asarray(terms, dtype=np.float64).T)  # (d, psi)
        self.nonzero = (self.terms != 0.0).astype(np.int32)
        self.d_num = d_num
        self.p = p
        d = self.terms.shape[0]
        self.active = set(range(d)) if active is None else set(int(j) for j in active)
        idx = sorted(self.active)
        num = [j for j in idx if j < d_num]
        nom = [j for j in idx if j >= d_num]
        psi = self.terms.shape[1]
        self.s_num = self.terms[num].sum(axis=0) if num else np.zeros(psi)
        self.s_nom = self.terms[nom].sum(axis=0) if nom else np.zeros(psi)
        self.nz = self.nonzero[idx].sum(axis=0) if idx else np.zeros(psi, dtype=np.int32)

    @classmethod
    def build(cls, qn, qc, Yn, Yc, ft: FrequencyTable | None, cfg: MetricConfig | None = None):
        cfg = cfg or MetricConfig()
        qn = np.asarray(qn, dtype=np.float64).ravel()
        qc = np.asarray(qc, dtype=np.int64).ravel()
        d_num, d_nom = qn.size, qc.size
        wn, wc = MetricConfig(p=cfg.p, weights_num=cfg.weights_num, weights_nom=cfg.weights_nom).resolve(d_num, d_nom)
        Yn = np.asarray(Yn, dtype=np.float64).reshape(-1, d_num)
        psi = Yn.shape[0] if d_num else np.asarray(Yc).shape[0]
        terms = np.empty((psi, d_num + d_nom))
        terms[:, :d_num] = wn * np.abs(Yn - qn) ** cfg.p
        if d_nom:
            Yc = np.asarray(Yc, dtype=np.int64).reshape(psi, d_nom)
            for k in range(d_nom):
                pen = np.maximum(_nominal_penalties(ft, k, qc[k : k + 1]), _nominal_penalties(ft, k, Yc[:, k]))
                terms[:, d_num + k] = np.where(Yc[:, k] != qc[k], -wc[k] * np.log1p(-pen), 0.0)
        return cls(terms, d_num, cfg.p, cfg.active)

    def _combine(self, s_num, s_nom, nz):
        return combine_terms(s_num, s_nom, nz, self.p)

    def distances(self) -> np.ndarray:
        return self._combine(self.s_num, self.s_nom, self.nz)

    def without(self, j: int) -> np.ndarray:
        """Distances over ``active - {j}`` without mutating the cache."""
        if j not in self.active:
            raise KeyError(f"feature {j} is not active")
        if j < self.d_num:
            return self._combine(self.s_num - self.terms[j], self.s_nom, self.nz - self.nonzero[j])
        return self._combine(self.s_num, self.s_nom - self.terms[j], self.nz - self.nonzero[j])

    def remove(self, j: int) -> np.ndarray:
        if j not in self.active:
            raise KeyError(f"feature {j} is not active")
        self.active.discard(j)
        if j < self.d_num:
            self.s_num = self.s_num - self.terms[j]
        else:
            self.s_nom = self.s_nom - self.terms[j]
        self.nz = self.nz - self.nonzero[j]
        return self.distances()

    def add(self, j: int) -> np.ndarray:
        if j in self.active:
            raise KeyError(f"feature {j} is already active")
        self.active.add(j)
        if j < self.d_num:
            self.s_num = self.s_num + self.terms[j]
        else:
            self.s_nom = self.s_nom + self.terms[j]
        self.nz = self.nz + self.nonzero[j]
        return self.distances()


def remove_feature_from_distances(cache: ContributionCache, j: int) -> np.ndarray:
    """Drop feature ``j`` from the cached distances and return the updated vector."""
    return cache.remove(j)
