"""AIDA ensemble: subsample storage at fit time, isolation scores at test time.

Training only stores ``N`` random subsamples (sizes uniform in
``[psi_min, psi_max]``, rows without replacement), an optional random feature
subspace per subsample, a per-subsample gap exponent and the nominal class
counts of the training set. Scoring builds each test row's distance profile
against every subsample, converts it to an isolation score, Z-normalizes each
subsample's column over the test batch and aggregates across subsamples.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from aida.dataset import Dataset, FrequencyTable, SchemaError, nominal_frequencies
from aida.isolation import ScoreConfig, profile_statistics
from aida.metric import MetricConfig, pairwise_distances

logger = logging.getLogger(__name__)

AGGREGATIONS = ("average", "max", "aom")
MODEL_FORMAT = "aida-model"
MODEL_VERSION = 1
_ROW_BLOCK = 256


@dataclass(frozen=True)
class ModelParams:
    n_subsamples: int = 100
    psi_min: int = 50
    psi_max: int = 512
    feature_bagging: bool | None = None  # None: on iff d > 5
    metric: MetricConfig = field(default_factory=MetricConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    aggregation: str = "aom"
    q: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_subsamples < 1:
            raise ValueError("n_subsamples must be >= 1")
        if not 2 <= self.psi_min <= self.psi_max:
            raise ValueError(f"need 2 <= psi_min <= psi_max, got {self.psi_min}, {self.psi_max}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.q < 1:
            raise ValueError("q must be >= 1")


@dataclass(frozen=True)
class Model:
    params: ModelParams
    subsamples: tuple[np.ndarray, ...]  # training row indices, one array per subsample
    subspaces: tuple[np.ndarray, ...]  # active feature indices per subsample
    alphas: np.ndarray
    freq: FrequencyTable
    buckets: np.ndarray  # column permutation used by AOM
    numeric: np.ndarray  # training rows referenced by any subsample
    nominal: np.ndarray
    feature_names: tuple[str, ...]
    categories: tuple[tuple[str, ...], ...]
    bagging: bool
    column_stats: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def d_num(self) -> int:
        return self.numeric.shape[1]

    @property
    def d_nom(self) -> int:
        return self.nominal.shape[1]

    @property
    def d(self) -> int:
        return self.d_num + self.d_nom

    @property
    def n_subsamples(self) -> int:
        return len(self.subsamples)

    def subsample(self, j: int):
        idx = self.subsamples[j]
        return self.numeric[idx], self.nominal[idx]

    def metric_for(self, j: int) -> MetricConfig:
        return self.params.metric.with_active(self.subspaces[j].tolist())


@dataclass(frozen=True)
class ScoreVector:
    raw: np.ndarray  # (n, N)
    normalized: np.ndarray  # (n, N)
    final: np.ndarray  # (n,)
    degenerate: np.ndarray  # (n, N) bool, profile made only of duplicates


def bagging_subspace(d: int, rng) -> np.ndarray:
    """Random subspace of size uniform in ``[d // 2, d - 1]``, features without replacement."""
    size = int(rng.integers(d // 2, d))
    return np.sort(rng.choice(d, size=size, replace=False))


def fit(train: Dataset, params: ModelParams | None = None) -> Model:
    params = params or ModelParams()
    n, d = train.n, train.d
    if n < 2:
        raise ValueError("need at least 2 training rows")
    psi_min, psi_max = params.psi_min, params.psi_max
    if psi_max > n:
        warnings.warn(f"psi_max={psi_max} exceeds n={n}; clamped to {n}")
        psi_max = n
        psi_min = min(psi_min, n)
    bagging = (d > 5) if params.feature_bagging is None else bool(params.feature_bagging)
    if bagging and d < 2:
        raise ValueError("feature bagging needs d >= 2")

    rng = np.random.default_rng(params.seed)
    subsamples, subspaces = [], []
    for _ in range(params.n_subsamples):
        psi = int(rng.integers(psi_min, psi_max + 1))
        subsamples.append(np.sort(rng.choice(n, size=psi, replace=False)))
        subspaces.append(bagging_subspace(d, rng) if bagging else np.arange(d))
    if params.score.alpha_range is not None:
        alphas = rng.uniform(*params.score.alpha_range, size=params.n_subsamples)
    else:
        alphas = np.full(params.n_subsamples, params.score.alpha)
    buckets = rng.permutation(params.n_subsamples)

    # keep only the rows some subsample refers to, re-indexed
    used = np.unique(np.concatenate(subsamples))
    remap = np.full(n, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return Model(
        params=params,
        subsamples=tuple(remap[s] for s in subsamples),
        subspaces=tuple(subspaces),
        alphas=alphas,
        freq=nominal_frequencies(train),
        buckets=buckets,
        numeric=train.numeric[used].copy(),
        nominal=train.nominal[used].copy(),
        feature_names=train.feature_names,
        categories=train.categories,
        bagging=bagging,
    )


def raw_scores(model: Model, test: Dataset, n_jobs: int = 1):
    """Per-subsample isolation scores, shape ``(n_test, N)``, plus the degenerate mask."""
    if test.d_num != model.d_num or test.d_nom != model.d_nom:
        raise SchemaError(
            f"test data has {test.d_num} numeric/{test.d_nom} nominal features, "
            f"model expects {model.d_num}/{model.d_nom}"
        )
    score_fn = model.params.score.score_fn

    def column(j):
        Yn, Yc = model.subsample(j)
        cfg, alpha = model.metric_for(j), float(model.alphas[j])
        stat = np.empty(test.n)
        dups = np.empty(test.n, dtype=np.int64)
        # row blocks keep the distance matrix cache-resident through sort and statistics
        for s in range(0, test.n, _ROW_BLOCK):
            rows = slice(s, s + _ROW_BLOCK)
            D = pairwise_distances(test.numeric[rows], test.nominal[rows], Yn, Yc, model.freq, cfg)
            D.sort(axis=1)
            stat[rows], dups[rows] = profile_statistics(D, alpha, score_fn)
        return -stat, dups == Yn.shape[0]

    N = model.n_subsamples
    if n_jobs == 1:
        cols = [column(j) for j in range(N)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            cols = list(pool.map(column, range(N)))
    raw = np.column_stack([c[0] for c in cols])
    degenerate = np.column_stack([c[1] for c in cols])
    return raw, degenerate


def zscore_columns(raw: np.ndarray, stats=None):
    """Z-normalize each column (ddof=1); constant columns become zeros."""
    if stats is None:
        mean = raw.mean(axis=0)
        std = raw.std(axis=0, ddof=1) if raw.shape[0] > 1 else np.zeros(raw.shape[1])
    else:
        mean, std = stats
    flat = ~(std > 0)
    if flat.any():
        warnings.warn(f"{int(flat.sum())} constant score column(s) set to zero")
    out = (raw - mean) / np.where(flat, 1.0, std)
    out[:, flat] = 0.0
    return out


def aggregate(columns: np.ndarray, method: str = "aom", q: int = 5, order=None) -> np.ndarray:
    """Combine normalized per-subsample scores row-wise.

    ``aom`` walks the columns in ``order`` (identity by default), cuts them
    into consecutive buckets of ``q`` (the last one may be short), takes the
    row maximum in each bucket and averages the maxima.
    """
    columns = np.asarray(columns, dtype=np.float64)
    if columns.ndim != 2 or columns.shape[1] < 1:
        raise ValueError("need an (n, N) matrix with N >= 1")
    if method == "average":
        return columns.mean(axis=1)
    if method == "max":
        return columns.max(axis=1)
    if method != "aom":
        raise ValueError(f"unknown aggregation {method!r}")
    N = columns.shape[1]
    if q > N:
        warnings.warn(f"bucket size q={q} exceeds N={N}; using a single bucket")
        q = N
    order = np.arange(N) if order is None else np.asarray(order)
    maxima = [columns[:, order[s : s + q]].max(axis=1) for s in range(0, N, q)]
    return np.mean(maxima, axis=0)


def calibrate(model: Model, reference: Dataset, n_jobs: int = 1) -> Model:
    """Store column mean/stddev of a reference batch for scoring single rows."""
    raw, _ = raw_scores(model, reference, n_jobs)
    std = raw.std(axis=0, ddof=1) if raw.shape[0] > 1 else np.zeros(raw.shape[1])
    return replace(model, column_stats=(raw.mean(axis=0), std))


def score_all(model: Model, test: Dataset, n_jobs: int = 1, use_stored_stats: bool = False) -> ScoreVector:
    """Score a test batch. Columns are normalized over the batch itself unless
    ``use_stored_stats`` (required for a single row) and the model is calibrated."""
    raw, degenerate = raw_scores(model, test, n_jobs)
    if use_stored_stats or test.n == 1:
        if model.column_stats is None:
            raise ValueError("scoring a single row needs a calibrated model (see calibrate)")
        norm = zscore_columns(raw, model.column_stats)
    else:
        norm = zscore_columns(raw)
    p = model.params
    final = aggregate(norm, p.aggregation, p.q, model.buckets)
    return ScoreVector(raw, norm, final, degenerate)


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic; ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0 or n_pos + n_neg != labels.size:
        raise ValueError("labels must be 0/1 with both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# --- persistence ---------------------------------------------------------------


def save_model(model: Model, path) -> None:
    """Write a model as an ``.npz`` bundle with a JSON header (see README)."""
    p = model.params
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "params": {
            "n_subsamples": p.n_subsamples,
            "psi_min": p.psi_min,
            "psi_max": p.psi_max,
            "feature_bagging": p.feature_bagging,
            "metric": asdict(p.metric),
            "score": asdict(p.score),
            "aggregation": p.aggregation,
            "q": p.q,
            "seed": p.seed,
        },
        "bagging": model.bagging,
        "feature_names": list(model.feature_names),
        "categories": [list(c) for c in model.categories],
        "n_train": model.freq.n_train,
    }
    arrays = {
        "header": np.array(json.dumps(header)),
        "subsample_offsets": np.cumsum([0] + [s.size for s in model.subsamples]),
        "subsample_rows": np.concatenate(model.subsamples),
        "subspace_offsets": np.cumsum([0] + [s.size for s in model.subspaces]),
        "subspace_features": np.concatenate(model.subspaces),
        "alphas": model.alphas,
        "buckets": model.buckets,
        "numeric": model.numeric,
        "nominal": model.nominal,
        "freq_offsets": np.cumsum([0] + [c.size for c in model.freq.counts]),
        "freq_counts": np.concatenate(model.freq.counts) if model.freq.counts else np.zeros(0, np.int64),
    }
    if model.column_stats is not None:
        arrays["stats_mean"], arrays["stats_std"] = model.column_stats
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> Model:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != MODEL_FORMAT:
            raise ValueError(f"{path}: not an AIDA model file")
        if header.get("version") != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported model version {header.get('version')}")
        hp = header["params"]
        metric = hp["metric"]
        score = hp["score"]
        params = ModelParams(
            n_subsamples=hp["n_subsamples"],
            psi_min=hp["psi_min"],
            psi_max=hp["psi_max"],
            feature_bagging=hp["feature_bagging"],
            metric=MetricConfig(
                p=metric["p"],
                weights_num=metric["weights_num"],
                weights_nom=metric["weights_nom"],
                active=metric["active"],
            ),
            score=ScoreConfig(
                score_fn=score["score_fn"],
                alpha=score["alpha"],
                alpha_range=None if score["alpha_range"] is None else tuple(score["alpha_range"]),
            ),
            aggregation=hp["aggregation"],
            q=hp["q"],
            seed=hp["seed"],
        )

        def split(values, offsets):
            return tuple(values[offsets[i] : offsets[i + 1]].copy() for i in range(offsets.size - 1))

        stats = (z["stats_mean"].copy(), z["stats_std"].copy()) if "stats_mean" in z else None
        return Model(
            params=params,
            subsamples=split(z["subsample_rows"], z["subsample_offsets"]),
            subspaces=split(z["subspace_features"], z["subspace_offsets"]),
            alphas=z["alphas"].copy(),
            freq=FrequencyTable(split(z["freq_counts"], z["freq_offsets"]), header["n_train"]),
            buckets=z["buckets"].copy(),
            numeric=z["numeric"].copy(),
            nominal=z["nominal"].copy(),
            feature_names=tuple(header["feature_names"]),
            categories=tuple(tuple(c) for c in header["categories"]),
            bagging=header["bagging"],
            column_stats=stats,
        )
