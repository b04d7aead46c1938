"""Column-typed datasets, CSV ingestion, Z-scores and synthetic generators.

A :class:`Dataset` keeps numeric and nominal features in separate blocks.
Nominal values are small dense integer ids; ``categories[k][id]`` gives the
original string. Everywhere else in the package feature ``j`` means numeric
column ``j`` for ``j < d_num`` and nominal column ``j - d_num`` otherwise.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for malformed input data (unparsable cells, empty files, bad labels)."""


class SchemaError(ValueError):
    """Raised when two datasets (or a dataset and a model) disagree on layout."""


@dataclass(frozen=True)
class Dataset:
    numeric: np.ndarray
    nominal: np.ndarray
    labels: np.ndarray | None = None
    feature_names: tuple[str, ...] = ()
    categories: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self):
        num = np.asarray(self.numeric, dtype=np.float64)
        nom = np.asarray(self.nominal, dtype=np.int64)
        if num.ndim == 1:
            num = num.reshape(-1, 1) if num.size else num.reshape(nom.shape[0] if nom.ndim == 2 else 0, 0)
        if nom.ndim == 1:
            nom = nom.reshape(num.shape[0], -1) if nom.size else np.zeros((num.shape[0], 0), dtype=np.int64)
        if num.shape[0] != nom.shape[0]:
            raise SchemaError(f"numeric block has {num.shape[0]} rows, nominal block has {nom.shape[0]}")
        if not np.all(np.isfinite(num)):
            raise DataError("numeric block contains NaN or Inf")
        if nom.size and nom.min() < 0:
            raise DataError("category ids must be non-negative")
        object.__setattr__(self, "numeric", num)
        object.__setattr__(self, "nominal", nom)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (num.shape[0],) or not np.all((lab == 0) | (lab == 1)):
                raise DataError("labels must be a 0/1 vector with one entry per row")
            object.__setattr__(self, "labels", lab)
        names = tuple(self.feature_names) or tuple(f"f{j}" for j in range(self.d))
        if len(names) != self.d:
            raise SchemaError(f"{len(names)} feature names for {self.d} features")
        object.__setattr__(self, "feature_names", names)
        cats = tuple(tuple(c) for c in self.categories)
        if not cats:
            cats = tuple(tuple(str(v) for v in range(int(nom[:, k].max()) + 1 if nom.shape[0] else 0)) for k in range(nom.shape[1]))
        if len(cats) != nom.shape[1]:
            raise SchemaError("one category list per nominal column is required")
        object.__setattr__(self, "categories", cats)

    @property
    def n(self) -> int:
        return self.numeric.shape[0]

    @property
    def d_num(self) -> int:
        return self.numeric.shape[1]

    @property
    def d_nom(self) -> int:
        return self.nominal.shape[1]

    @property
    def d(self) -> int:
        return self.d_num + self.d_nom

    def row(self, i: int):
        return self.numeric[i], self.nominal[i]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.numeric[idx],
            self.nominal[idx],
            None if self.labels is None else self.labels[idx],
            self.feature_names,
            self.categories,
        )

    def same_schema(self, other: "Dataset") -> bool:
        return self.d_num == other.d_num and self.d_nom == other.d_nom


@dataclass(frozen=True)
class FrequencyTable:
    """Class counts per nominal feature over the fitting data."""

    counts: tuple[np.ndarray, ...]
    n_train: int

    def count(self, k: int, cls: int) -> int:
        c = self.counts[k]
        return int(c[cls]) if 0 <= cls < c.size else 0

    def counts_for(self, k: int, classes: np.ndarray) -> np.ndarray:
        c = self.counts[k]
        classes = np.asarray(classes, dtype=np.int64)
        known = (classes >= 0) & (classes < c.size)
        out = np.zeros(classes.shape, dtype=np.int64)
        out[known] = c[classes[known]]
        return out

    def as_dict(self, k: int) -> dict[int, int]:
        return {i: int(v) for i, v in enumerate(self.counts[k]) if v > 0}


def nominal_frequencies(ds: Dataset) -> FrequencyTable:
    counts = tuple(np.bincount(ds.nominal[:, k], minlength=len(ds.categories[k])) for k in range(ds.d_nom))
    return FrequencyTable(counts, ds.n)


# --- CSV ---------------------------------------------------------------------


def load_csv(path, nominal_columns=(), label_column: int | None = None, categories=None) -> Dataset:
    """Read a comma-separated file with a header row.

    ``nominal_columns``/``label_column`` are column indices in the file.
    Nominal strings map to ids in first-occurrence order; pass ``categories``
    from a training set to reuse its encoding (unseen strings get new ids).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    ncol = len(header)
    nominal_columns = sorted(set(int(c) for c in nominal_columns))
    for c in list(nominal_columns) + ([label_column] if label_column is not None else []):
        if not 0 <= c < ncol:
            raise DataError(f"{path}: column index {c} out of range (file has {ncol} columns)")
    if label_column in nominal_columns:
        raise DataError("label column cannot also be nominal")
    numeric_columns = [c for c in range(ncol) if c not in nominal_columns and c != label_column]

    num = np.empty((len(body), len(numeric_columns)))
    nom = np.empty((len(body), len(nominal_columns)), dtype=np.int64)
    labels = np.empty(len(body), dtype=np.int64) if label_column is not None else None
    maps = []
    for k in range(len(nominal_columns)):
        known = list(categories[k]) if categories is not None else []
        maps.append({s: i for i, s in enumerate(known)})

    for r, row in enumerate(body, start=2):
        if len(row) != ncol:
            raise DataError(f"{path}: row {r} has {len(row)} fields, expected {ncol}")
        i = r - 2
        for out_j, c in enumerate(numeric_columns):
            cell = row[c].strip()
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {r}, column {c} ({header[c]!r}): cannot parse {cell!r} as a number") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: row {r}, column {c} ({header[c]!r}): non-finite value {cell!r}")
            num[i, out_j] = v
        for k, c in enumerate(nominal_columns):
            cell = row[c].strip()
            if cell == "":
                raise DataError(f"{path}: row {r}, column {c} ({header[c]!r}): missing value")
            nom[i, k] = maps[k].setdefault(cell, len(maps[k]))
        if labels is not None:
            cell = row[label_column].strip()
            try:
                lab = int(float(cell))
            except ValueError:
                raise DataError(f"{path}: row {r}: label {cell!r} is not 0/1") from None
            if lab not in (0, 1):
                raise DataError(f"{path}: row {r}: label {cell!r} is not 0/1")
            labels[i] = lab

    names = tuple(header[c] for c in numeric_columns) + tuple(header[c] for c in nominal_columns)
    cats = tuple(tuple(sorted(m, key=m.get)) for m in maps)
    return Dataset(num, nom, labels, names, cats)


def write_csv(ds: Dataset, path, label_name: str = "label") -> None:
    """Inverse of :func:`load_csv`: numeric columns, nominal columns, then labels.

    Floats are written with ``repr`` so a reload is bit-exact.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = list(ds.feature_names) + ([label_name] if ds.labels is not None else [])
        w.writerow(header)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.numeric[i]]
            row += [ds.categories[k][ds.nominal[i, k]] for k in range(ds.d_nom)]
            if ds.labels is not None:
                row.append(str(int(ds.labels[i])))
            w.writerow(row)


def csv_layout(ds: Dataset) -> dict:
    """Column indices to pass back to :func:`load_csv` for a file from :func:`write_csv`."""
    return {
        "nominal_columns": list(range(ds.d_num, ds.d)),
        "label_column": ds.d if ds.labels is not None else None,
    }


# --- normalization -----------------------------------------------------------


@dataclass(frozen=True)
class ZScoreParams:
    mean: np.ndarray
    std: np.ndarray
    constant: tuple[int, ...] = ()

    def apply(self, ds: Dataset) -> Dataset:
        if ds.d_num != self.mean.size:
            raise SchemaError(f"expected {self.mean.size} numeric features, got {ds.d_num}")
        return Dataset((ds.numeric - self.mean) / self.std, ds.nominal, ds.labels, ds.feature_names, ds.categories)

    @property
    def warnings(self) -> list[str]:
        return [f"numeric feature {j} is constant; left as zeros" for j in self.constant]


def zscore_normalize(ds: Dataset) -> tuple[Dataset, ZScoreParams]:
    """Center and scale numeric features with the sample (ddof=1) stddev.

    Constant features get stddev 1 and become all-zero; their indices are
    reported in ``params.constant``.
    """
    if ds.d_num < 1:
        raise DataError("no numeric features to normalize")
    mean = ds.numeric.mean(axis=0)
    std = ds.numeric.std(axis=0, ddof=1) if ds.n > 1 else np.zeros(ds.d_num)
    constant = tuple(int(j) for j in np.flatnonzero(~(std > 0)))
    std = np.where(std > 0, std, 1.0)
    params = ZScoreParams(mean, std, constant)
    for msg in params.warnings:
        logger.warning(msg)
    return params.apply(ds), params


# --- generators --------------------------------------------------------------

TWO_CLUSTERS = "two_clusters_2d"
CROSS = "cross"
HIDDEN = "hidden_subspace"
GENERATOR_KINDS = (TWO_CLUSTERS, CROSS, HIDDEN)

# cross: two bars of this width centred at 0.5 in the last two features
CROSS_BAR_WIDTH = 0.1
# hidden subspace: lattice levels per feature, cluster spread, outlier level shift
HIDDEN_LEVELS = 2
HIDDEN_NOISE = 0.05
HIDDEN_SHIFT = 1
# two clusters: (share, centre, stddev); outliers kept this many stddevs away
TWO_CLUSTER_LAYOUT = ((0.7, (0.0, 0.0), 1.0), (0.3, (5.0, 3.5), 0.5))
TWO_CLUSTER_OUTLIER_SHARE = 0.01
TWO_CLUSTER_CLEARANCE = 4.0


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str
    n: int
    d: int = 2
    subspaces: tuple[tuple[tuple[int, ...], int], ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"kind must be one of {GENERATOR_KINDS}, got {self.kind!r}")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        subs = tuple((tuple(int(j) for j in feats), int(k)) for feats, k in self.subspaces)
        object.__setattr__(self, "subspaces", subs)
        if self.kind == TWO_CLUSTERS and self.d != 2:
            raise ValueError("two_clusters_2d needs d == 2")
        if self.kind == CROSS and self.d < 2:
            raise ValueError("cross needs d >= 2")
        if self.kind == HIDDEN:
            if not subs:
                raise ValueError("hidden_subspace needs at least one subspace")
            seen = set()
            for feats, k in subs:
                if not 2 <= len(feats) <= 5:
                    raise ValueError(f"subspace sizes must be in [2, 5], got {feats}")
                if any(j < 0 or j >= self.d for j in feats):
                    raise ValueError(f"subspace {feats} outside 0..{self.d - 1}")
                if seen & set(feats) or len(set(feats)) != len(feats):
                    raise ValueError("subspaces must be disjoint")
                seen |= set(feats)
                if k < 0:
                    raise ValueError("outlier counts must be >= 0")
            if sum(k for _, k in subs) >= self.n:
                raise ValueError("more outliers than rows")


@dataclass(frozen=True)
class Generated:
    dataset: Dataset
    relevant: dict[int, tuple[int, ...]] = field(default_factory=dict)


def generate(spec: GeneratorSpec) -> Generated:
    rng = np.random.default_rng(spec.seed)
    if spec.kind == CROSS:
        return _cross(spec, rng)
    if spec.kind == HIDDEN:
        return _hidden(spec, rng)
    return _two_clusters(spec, rng)


def _cross(spec: GeneratorSpec, rng) -> Generated:
    n, d = spec.n, spec.d
    X = rng.random((n, d))
    lo, hi = 0.5 - CROSS_BAR_WIDTH / 2, 0.5 + CROSS_BAR_WIDTH / 2
    inl = n - 1
    horizontal = rng.random(inl) < 0.5
    a, b = d - 2, d - 1
    # one coordinate spans [0, 1], the other stays inside the bar
    X[:inl, a] = np.where(horizontal, rng.random(inl), rng.uniform(lo, hi, inl))
    X[:inl, b] = np.where(horizontal, rng.uniform(lo, hi, inl), rng.random(inl))
    centre = lo / 2
    qx, qy = rng.integers(0, 2, size=2)
    X[n - 1, a] = centre if qx == 0 else 1 - centre
    X[n - 1, b] = centre if qy == 0 else 1 - centre
    order = rng.permutation(n)
    X = X[order]
    labels = (order == n - 1).astype(np.int64)
    out = int(np.flatnonzero(labels)[0])
    return Generated(Dataset(X, np.zeros((n, 0), np.int64), labels), {out: (a, b)})


def _hidden(spec: GeneratorSpec, rng) -> Generated:
    """Lattice clusters per subspace ``(f_1..f_r)``.

    Inliers sit near lattice points whose last level is the sum of the other
    levels mod ``HIDDEN_LEVELS``. Every proper projection of the subspace then
    covers all lattice cells evenly, so an outlier placed on an empty cell
    (sum shifted by ``HIDDEN_SHIFT``) is only visible with all ``r`` features.
    Features outside any subspace are uniform on [0, 1].
    """
    n, d = spec.n, spec.d
    X = rng.random((n, d))
    labels = np.zeros(n, dtype=np.int64)
    relevant: dict[int, tuple[int, ...]] = {}
    owners = rng.permutation(n)
    start = 0
    for feats, k in spec.subspaces:
        idx = owners[start : start + k]
        start += k
        labels[idx] = 1
        for i in idx:
            relevant[int(i)] = feats
    K = HIDDEN_LEVELS
    for feats, _ in spec.subspaces:
        levels = rng.integers(0, K, size=(n, len(feats)))
        shift = np.zeros(n, dtype=np.int64)
        shift[[i for i, f in relevant.items() if f == feats]] = HIDDEN_SHIFT
        levels[:, -1] = (levels[:, :-1].sum(axis=1) + shift) % K
        X[:, list(feats)] = (levels + 0.5) / K + rng.normal(0.0, HIDDEN_NOISE, size=levels.shape)
    return Generated(Dataset(X, np.zeros((n, 0), np.int64), labels), dict(sorted(relevant.items())))


def _two_clusters(spec: GeneratorSpec, rng) -> Generated:
    n = spec.n
    n_out = max(1, int(round(TWO_CLUSTER_OUTLIER_SHARE * n)))
    n_in = n - n_out
    sizes = [int(round(share * n_in)) for share, _, _ in TWO_CLUSTER_LAYOUT]
    sizes[-1] = n_in - sum(sizes[:-1])
    parts = [rng.normal(c, s, size=(m, 2)) for m, (_, c, s) in zip(sizes, TWO_CLUSTER_LAYOUT)]
    centres = np.array([c for _, c, _ in TWO_CLUSTER_LAYOUT])
    scales = np.array([s for _, _, s in TWO_CLUSTER_LAYOUT])
    reach = (TWO_CLUSTER_CLEARANCE + 1.5) * scales[:, None]
    box_lo = (centres - reach).min(axis=0)
    box_hi = (centres + reach).max(axis=0)
    outliers = []
    while len(outliers) < n_out:
        p = rng.uniform(box_lo, box_hi)
        if np.all(np.linalg.norm((p - centres) / scales[:, None], axis=1) > TWO_CLUSTER_CLEARANCE):
            outliers.append(p)
    X = np.vstack(parts + [np.array(outliers)])
    labels = np.r_[np.zeros(n_in, np.int64), np.ones(n_out, np.int64)]
    order = rng.permutation(n)
    return Generated(Dataset(X[order], np.zeros((n, 0), np.int64), labels[order]))
