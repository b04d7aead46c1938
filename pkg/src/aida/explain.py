"""Feature-relevance explanations for a single point.

The explainer starts from the full feature set and proposes removing one
random feature at a time. A removal that makes the point easier to isolate
(higher score) is always taken; a removal that makes it harder is taken with
a tempered acceptance probability. Features that survive longer are more
relevant. Path lengths are collected over every subsample of a fitted model
and several repetitions, then averaged.

Runs are simulated state by state. Within a fixed feature set the candidate
scores do not change, so after a few rejected proposals all candidates are
scored in one batch and the number of further proposals until the next
acceptance is drawn from a geometric law. This is exact in distribution and
makes long rejection streaks cost a single batch.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import Model
from .isolation import SCORE_FUNCTIONS, VARIANCE, profile_statistics
from .metric import ContributionCache, MetricConfig, combine_terms, pairwise_distances

logger = logging.getLogger(__name__)

ACCEPT_AT_DELTA = 0.9  # acceptance probability assigned to a relative drop of delta
ZERO_SCORE_EPS = 1e-12
# consecutive rejections in one state before all candidates are scored at once
_LAZY_PROPOSALS = 3

RANK = "rank"
ADDITIVE = "additive"
OFFSET_MODES = (RANK, ADDITIVE)


def temperature_from_delta(delta: float) -> float:
    """Temperature at which a relative score drop of ``delta`` is accepted with probability 0.9."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    return delta / math.log(1.0 / ACCEPT_AT_DELTA)


def acceptance_probability(f_with: float, f_without: float, T: float, eps: float = ZERO_SCORE_EPS) -> float:
    """Probability of dropping a feature whose removal moves the score from ``f_with`` to ``f_without``.

    Scores are negative, so the relative change is taken against ``|f_with|``;
    a zero ``f_with`` is replaced by ``eps`` with a warning.
    """
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    if f_without >= f_with:
        return 1.0
    denom = abs(f_with)
    if denom == 0.0:
        warnings.warn(f"score with the feature is 0; using eps={eps} in the acceptance ratio")
        denom = eps
    return float(math.exp((f_without - f_with) / (denom * T)))


def _acceptance_vector(f_with: float, f_without: np.ndarray, T: float, greedy: bool) -> np.ndarray:
    better = f_without >= f_with
    if greedy:
        return better.astype(np.float64)
    denom = abs(f_with) or ZERO_SCORE_EPS
    with np.errstate(over="ignore", under="ignore"):
        p = np.exp(np.minimum(f_without - f_with, 0.0) / (denom * T))
    p[better] = 1.0
    return p


@dataclass(frozen=True)
class TixParams:
    """Explainer settings.

    ``L`` defaults to 50 times the number of features explained. A fixed
    ``temperature`` overrides the per-run draw of ``delta`` from ``delta_range``.
    ``score_fn`` picks the isolation statistic used to compare feature sets.
    """

    M: int = 10
    L: int | None = None
    delta_range: tuple[float, float] = (0.01, 0.015)
    temperature: float | None = None
    greedy: bool = False
    seed: int = 0
    n_jobs: int = 1
    score_fn: str = VARIANCE

    def __post_init__(self):
        if self.score_fn not in SCORE_FUNCTIONS:
            raise ValueError(f"score_fn must be one of {SCORE_FUNCTIONS}")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.L is not None and self.L < 1:
            raise ValueError("L must be >= 1")
        lo, hi = self.delta_range
        if not (0 < lo <= hi):
            raise ValueError(f"delta_range must satisfy 0 < min <= max, got {self.delta_range}")
        if self.temperature is not None and not self.temperature > 0:
            raise ValueError("temperature must be positive")

    def max_iterations(self, d: int) -> int:
        return self.L if self.L is not None else 50 * d


@dataclass(frozen=True)
class PathLengthTable:
    features: tuple[int, ...]  # explained feature indices, in table order
    path_length: np.ndarray  # (len(features), N, M)
    L: int

    @property
    def aggregate(self) -> np.ndarray:
        return self.path_length.reshape(len(self.features), -1).mean(axis=1)

    @property
    def rank(self) -> np.ndarray:
        """1 = most relevant; ties share the best rank."""
        agg = self.aggregate
        return 1 + (agg[None, :] > agg[:, None]).sum(axis=1)

    def order(self) -> list[int]:
        """Feature indices sorted from most to least relevant, ties by index."""
        agg = self.aggregate
        return [self.features[t] for t in np.argsort(-agg, kind="stable")]

    def scores(self) -> dict[int, float]:
        return dict(zip(self.features, self.aggregate.tolist()))


def minimal_subspace(scores, relevant) -> int:
    """Size of the smallest top-scored prefix holding every relevant feature.

    ``scores`` maps feature -> score (or is an array indexed by feature).
    Ties are resolved pessimistically: a relevant feature is placed after
    every feature with an equal score.
    """
    if not isinstance(scores, dict):
        scores = dict(enumerate(np.asarray(scores, dtype=np.float64).tolist()))
    vals = np.array(list(scores.values()))
    worst = 0
    for j in relevant:
        worst = max(worst, int(np.count_nonzero(vals >= scores[j])))
    return worst


class _Run:
    """Numeric state of one explainer run on one subsample."""

    def __init__(self, terms, nonzero, is_num, p, score_fn=VARIANCE):
        self.terms = terms  # (m, psi)
        self.nonzero = nonzero
        self.is_num = is_num
        self.p = p
        self.score_fn = score_fn
        self.s_num = terms[is_num].sum(axis=0)
        self.s_nom = terms[~is_num].sum(axis=0)
        self.nz = nonzero.sum(axis=0)

    def score(self) -> float:
        return self._scores(self.s_num[None], self.s_nom[None], self.nz[None])[0]

    def _scores(self, s_num, s_nom, nz):
        D = combine_terms(s_num, s_nom, nz, self.p)
        D.sort(axis=1)
        stat, _ = profile_statistics(D, 1.0, self.score_fn)
        return -stat

    def scores_without(self, cands: np.ndarray) -> np.ndarray:
        t = self.terms[cands]
        num = self.is_num[cands, None]
        return self._scores(
            self.s_num - np.where(num, t, 0.0),
            self.s_nom - np.where(num, 0.0, t),
            self.nz - self.nonzero[cands],
        )

    def remove(self, j: int):
        if self.is_num[j]:
            self.s_num = self.s_num - self.terms[j]
        else:
            self.s_nom = self.s_nom - self.terms[j]
        self.nz = self.nz - self.nonzero[j]


def _run_once(run: _Run, L: int, T: float, greedy: bool, rng) -> np.ndarray:
    m = run.terms.shape[0]
    path = np.zeros(m, dtype=np.int64)
    J = list(range(m))
    f_cur = run.score()
    cache: dict[int, float] = {}
    rejections = 0
    l = 0
    while l < L and len(J) > 1:
        if rejections >= _LAZY_PROPOSALS:
            missing = [j for j in J if j not in cache]
            if missing:
                cache.update(zip(missing, run.scores_without(np.array(missing)).tolist()))
            p = _acceptance_vector(f_cur, np.array([cache[j] for j in J]), T, greedy)
            p_bar = p.mean()
            if p_bar <= 0.0:
                l = L
                break
            wait = int(rng.geometric(p_bar))  # proposals up to and including the acceptance
            if l + wait - 1 >= L:
                l = L
                break
            l += wait - 1
            j = J[int(rng.choice(len(J), p=p / p.sum()))]
            accept = True
        else:
            j = J[int(rng.integers(len(J)))]
            if j not in cache:
                cache[j] = float(run.scores_without(np.array([j]))[0])
            f_new = cache[j]
            if f_new >= f_cur:
                accept = True
            elif greedy:
                accept = False
            else:
                denom = abs(f_cur) or ZERO_SCORE_EPS
                accept = math.exp((f_new - f_cur) / (denom * T)) > rng.random()
        if accept:
            run.remove(j)
            J.remove(j)
            f_cur = cache[j]
            cache = {}
            rejections = 0
            path[j] = l
        else:
            rejections += 1
        l += 1
    path[J] = l
    return path


def _subsample_terms(model: Model, i: int, qn, qc, features):
    Yn, Yc = model.subsample(i)
    cfg = MetricConfig(p=model.params.metric.p)
    cache = ContributionCache.build(qn, qc, Yn, Yc, model.freq, cfg)
    f = np.asarray(features)
    return cache.terms[f], cache.nonzero[f]


def _check_model(model: Model):
    if model.bagging or any(s.size != model.d for s in model.subspaces):
        raise ValueError("explanations need a model fitted on the full feature space (feature bagging off)")


def tix(model: Model, x, params: TixParams | None = None, features=None) -> PathLengthTable:
    """Path lengths of ``x``'s features over every subsample and repetition.

    ``x`` is a numeric row, or a ``(numeric, nominal)`` pair. ``features``
    restricts the explanation to a subset of feature indices. Candidate
    sets are scored with ``params.score_fn`` at ``alpha = 1`` whatever the
    model was fitted with; feature weights are ignored.
    """
    params = params or TixParams()
    _check_model(model)
    qn, qc = _split_query(model, x)
    features = tuple(range(model.d)) if features is None else tuple(int(j) for j in features)
    if len(set(features)) != len(features) or not features:
        raise ValueError("features must be a non-empty list of distinct indices")
    if min(features) < 0 or max(features) >= model.d:
        raise ValueError(f"feature index out of range for d={model.d}")
    m = len(features)
    L = params.max_iterations(m)
    is_num = np.array([j < model.d_num for j in features])
    N, M = model.n_subsamples, params.M

    def per_subsample(i):
        terms, nonzero = _subsample_terms(model, i, qn, qc, features)
        out = np.empty((m, M), dtype=np.int64)
        for k in range(M):
            rng = np.random.default_rng([params.seed, k, i])
            if params.temperature is not None:
                T = params.temperature
            else:
                T = temperature_from_delta(rng.uniform(*params.delta_range))
            run = _Run(terms, nonzero, is_num, model.params.metric.p, params.score_fn)
            out[:, k] = _run_once(run, L, T, params.greedy, rng)
        return out

    if params.n_jobs == 1:
        cols = [per_subsample(i) for i in range(N)]
    else:
        with ThreadPoolExecutor(max_workers=params.n_jobs) as pool:
            cols = list(pool.map(per_subsample, range(N)))
    return PathLengthTable(features=features, path_length=np.stack(cols, axis=1), L=L)


def _split_query(model: Model, x):
    if isinstance(x, tuple):
        qn, qc = x
    else:
        qn, qc = x, np.zeros(0, dtype=np.int64)
    qn = np.asarray(qn, dtype=np.float64).ravel()
    qc = np.asarray(qc, dtype=np.int64).ravel()
    if qn.size != model.d_num or qc.size != model.d_nom:
        raise ValueError(f"query has {qn.size}+{qc.size} features, model expects {model.d_num}+{model.d_nom}")
    return qn, qc


@dataclass(frozen=True)
class RefineParams:
    beta: float = 1.5
    k_min: int = 10
    mode: str = RANK

    def __post_init__(self):
        if not self.beta > 1:
            raise ValueError(f"beta must be > 1, got {self.beta}")
        if self.k_min < 1:
            raise ValueError("k_min must be >= 1")
        if self.mode not in OFFSET_MODES:
            raise ValueError(f"mode must be one of {OFFSET_MODES}")


@dataclass(frozen=True)
class Refinement:
    order: tuple[int, ...]  # most relevant first
    scores: dict[int, float]
    offsets: dict[int, int]  # additive offset d - k of the stage that last scored each feature
    stages: tuple[PathLengthTable, ...] = field(repr=False)


def stage_sizes(d: int, beta: float, k_min: int) -> list[int]:
    """Feature-set sizes of the successive explainer passes."""
    sizes = [d]
    while sizes[-1] > k_min:
        k = max(math.floor(sizes[-1] / beta), k_min)
        sizes.append(k)
    return sizes


def refine(model: Model, x, tix_params: TixParams | None = None, refine_params: RefineParams | None = None) -> Refinement:
    """Repeated explanation on the top-``k`` survivors of the previous pass.

    After each pass the set shrinks to ``max(floor(k / beta), k_min)``
    features; the pass at ``k_min`` features is the last one. Features
    dropped after a pass keep that pass's ordering below every survivor
    (``rank`` mode), or keep their mean path length plus ``d - k``
    (``additive`` mode).
    """
    tix_params = tix_params or TixParams()
    refine_params = refine_params or RefineParams()
    d = model.d
    sizes = stage_sizes(d, refine_params.beta, refine_params.k_min)
    current = list(range(d))
    tables = []
    dropped: list[tuple[int, float, int]] = []  # feature, stage score, stage size; in drop order
    for s, k in enumerate(sizes):
        table = tix(model, x, tix_params, features=current)
        tables.append(table)
        order = table.order()
        stage_scores = table.scores()
        keep = order if s + 1 == len(sizes) else order[: sizes[s + 1]]
        gone = order[len(keep) :]
        # appended in reverse so the list ends most relevant last
        for j in reversed(gone):
            dropped.append((j, stage_scores[j], k))
        current = keep
    for j in reversed(current):
        dropped.append((j, tables[-1].scores()[j], sizes[-1]))

    final_order = [j for j, _, _ in reversed(dropped)]
    offsets = {j: d - k for j, _, k in dropped}
    if refine_params.mode == RANK:
        scores = {j: float(d - pos) for pos, j in enumerate(final_order)}
    else:
        scores = {j: sc + (d - k) for j, sc, k in dropped}
        final_order = sorted(final_order, key=lambda j: -scores[j])
    return Refinement(order=tuple(final_order), scores=scores, offsets=offsets, stages=tuple(tables))


def write_explanation_csv(path, feature_names, scores: dict[int, float], offsets: dict[int, int] | None = None):
    order = sorted(scores, key=lambda j: (-scores[j], j))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "score", "rank", "offset"])
        for pos, j in enumerate(order):
            w.writerow([feature_names[j], repr(float(scores[j])), pos + 1, (offsets or {}).get(j, 0)])


# -- constant-shift analysis -------------------------------------------------


def score_shift_difference(z, dx: float) -> float:
    """Closed-form change of the negated expected split count when a feature is dropped.

    ``z`` is a distance profile (leading 0, strictly increasing) over a
    feature set in which one feature adds the constant ``dx`` to every
    Manhattan distance. Dropping it shifts every nonzero entry down by ``dx``;
    the returned value is ``score_without - score_with``.
    """
    z = np.asarray(z, dtype=np.float64)
    if z[0] != 0.0 or np.any(np.diff(z) <= 0):
        raise ValueError("profile must start at 0 and be strictly increasing")
    if not 0 <= dx < z[1]:
        raise ValueError("dx must be non-negative and below the smallest nonzero distance")
    gaps = np.diff(z[1:])
    upper = z[2:]
    return float(-dx * np.sum(gaps / (upper * (upper - dx))))


def greedy_never_removes(profiles, shifts) -> bool:
    """True when every constant-shift feature makes the expectation score strictly worse to drop.

    Checks the closed form against a direct recomputation for each pair.
    """
    from .isolation import expected_splits

    for z in profiles:
        z = np.asarray(z, dtype=np.float64)
        for dx in shifts:
            if dx <= 0 or dx >= z[1]:
                continue
            closed = score_shift_difference(z, dx)
            without = z.copy()
            without[1:] -= dx
            direct = expected_splits(z) - expected_splits(without)
            if not np.isclose(closed, direct, rtol=1e-6, atol=1e-15) or not closed < 0:
                return False
    return True


# -- distance profile plots --------------------------------------------------

DPP_FIELDS = ("m", "feature", "min", "q1", "median", "q3", "max", "lower_whisker", "upper_whisker", "isolation_gap")


@dataclass(frozen=True)
class DppRow:
    m: int
    feature: int  # feature added at this prefix
    min: float
    q1: float
    median: float
    q3: float
    max: float
    lower_whisker: float
    upper_whisker: float
    isolation_gap: float  # smallest nonzero distance, nan if none


def _box(values: np.ndarray):
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    inside = values[(values >= q1 - 1.5 * iqr) & (values <= q3 + 1.5 * iqr)]
    pos = values[values > 0]
    gap = float(pos.min()) if pos.size else float("nan")
    return (
        float(values.min()), float(q1), float(med), float(q3), float(values.max()),
        float(inside.min()), float(inside.max()), gap,
    )


def dpp(reference, x, feature_order, m_max: int | None = None, p: float | None = None, drop_self: bool = True) -> list[DppRow]:
    """Boxplot summaries of ``x``'s distances over growing feature prefixes.

    ``reference`` is a fitted :class:`Model` (every stored training row is
    used) or a numeric array of reference rows. The query's own zero is not
    part of the summary: with ``drop_self`` one reference row identical to
    ``x`` in every feature is taken to be ``x`` itself and left out.
    """
    if isinstance(reference, Model):
        Yn, Yc, ft = reference.numeric, reference.nominal, reference.freq
        d_num, d = reference.d_num, reference.d
        p = reference.params.metric.p if p is None else p
        qn, qc = _split_query(reference, x)
    else:
        Yn = np.atleast_2d(np.asarray(reference, dtype=np.float64))
        d_num = d = Yn.shape[1]
        Yc, ft = np.zeros((Yn.shape[0], 0), dtype=np.int64), None
        qn, qc = np.asarray(x, dtype=np.float64).ravel(), np.zeros(0, dtype=np.int64)
        p = 1.0 if p is None else p
    if drop_self:
        same = np.flatnonzero(np.all(Yn == qn, axis=1) & np.all(Yc == qc, axis=1))
        if same.size:
            keep = np.arange(Yn.shape[0]) != same[0]
            Yn, Yc = Yn[keep], Yc[keep]
    if Yn.shape[0] == 0:
        raise ValueError("reference set is empty")
    order = [int(j) for j in feature_order]
    if len(set(order)) != len(order) or any(j < 0 or j >= d for j in order):
        raise ValueError("feature_order must hold distinct valid feature indices")
    m_max = len(order) if m_max is None else m_max
    if not 1 <= m_max <= len(order):
        raise ValueError("m_max must be between 1 and len(feature_order)")
    rows = []
    for m in range(1, m_max + 1):
        cfg = MetricConfig(p=p, active=order[:m])
        D = pairwise_distances(qn[None], qc[None], Yn, Yc, ft, cfg)[0]
        rows.append(DppRow(m, order[m - 1], *_box(np.sort(D))))
    logger.debug("dpp over %d prefixes of %d reference rows", m_max, Yn.shape[0])
    return rows


def write_dpp_csv(rows: list[DppRow], path, feature_names=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DPP_FIELDS)
        for r in rows:
            name = feature_names[r.feature] if feature_names else r.feature
            w.writerow([r.m, name] + [repr(v) for v in (r.min, r.q1, r.median, r.q3, r.max,
                                                        r.lower_whisker, r.upper_whisker, r.isolation_gap)])


def write_dpp_svg(rows: list[DppRow], path, feature_names=None, width: int = 640, row_height: int = 28):
    """Horizontal boxplots, one per prefix, top to bottom; the query sits at x = 0."""
    left, right, top = 120, 20, 20
    hi = max(r.max for r in rows) or 1.0
    sx = (width - left - right) / hi
    height = top * 2 + row_height * len(rows)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<line x1="{left}" y1="{top - 5}" x2="{left}" y2="{height - top + 5}" stroke="#c33"/>',
    ]
    for t, r in enumerate(rows):
        y = top + t * row_height + row_height / 2
        h = row_height * 0.6
        name = feature_names[r.feature] if feature_names else str(r.feature)
        X = lambda v: left + v * sx  # noqa: E731
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">+{name} (m={r.m})</text>')
        out.append(f'<line x1="{X(r.lower_whisker):.2f}" y1="{y:.1f}" x2="{X(r.q1):.2f}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<line x1="{X(r.q3):.2f}" y1="{y:.1f}" x2="{X(r.upper_whisker):.2f}" y2="{y:.1f}" stroke="black"/>')
        out.append(
            f'<rect x="{X(r.q1):.2f}" y="{y - h / 2:.1f}" width="{max(X(r.q3) - X(r.q1), 0.5):.2f}" '
            f'height="{h:.1f}" fill="#9bc" stroke="black"/>'
        )
        out.append(f'<line x1="{X(r.median):.2f}" y1="{y - h / 2:.1f}" x2="{X(r.median):.2f}" y2="{y + h / 2:.1f}" stroke="black" stroke-width="2"/>')
        out.append(f'<circle cx="{left}" cy="{y:.1f}" r="3" fill="#c33"/>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
