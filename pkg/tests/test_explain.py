import math

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from aida import explain
from aida.dataset import CROSS, HIDDEN, Dataset, GeneratorSpec, generate
from aida.detector import ModelParams, fit
from aida.explain import (
    ADDITIVE,
    RANK,
    RefineParams,
    TixParams,
    acceptance_probability,
    dpp,
    greedy_never_removes,
    minimal_subspace,
    refine,
    score_shift_difference,
    stage_sizes,
    temperature_from_delta,
    tix,
    write_dpp_csv,
    write_dpp_svg,
    write_explanation_csv,
)
from aida.isolation import EXPECTATION, VARIANCE, ScoreConfig, expected_splits

from oracles import tix_run_by_recomputation


def _model(n=60, d=6, seed=0, N=3, **kw):
    rng = np.random.default_rng(seed)
    ds = Dataset(rng.normal(size=(n, d)), np.zeros((n, 0)))
    params = dict(n_subsamples=N, psi_min=20, psi_max=40, feature_bagging=False, seed=seed)
    params.update(kw)
    return ds, fit(ds, ModelParams(**params))


def _random_profile(rng, n=None):
    n = n or int(rng.integers(3, 40))
    return np.concatenate([[0.0], np.cumsum(rng.uniform(0.01, 2.0, size=n - 1))])


# -- acceptance rule ----------------------------------------------------------------


def test_temperature_examples():
    assert temperature_from_delta(0.01) == pytest.approx(0.094912, abs=1e-6)
    assert temperature_from_delta(math.log(10 / 9)) == pytest.approx(1.0, rel=1e-15)
    assert temperature_from_delta(0.02) == pytest.approx(2 * temperature_from_delta(0.01), rel=1e-15)
    with pytest.raises(ValueError):
        temperature_from_delta(0.0)


def test_acceptance_examples():
    T = temperature_from_delta(0.01)
    assert acceptance_probability(-2.0, -2.0, T) == 1.0
    assert acceptance_probability(-2.0, -1.0, T) == 1.0
    assert acceptance_probability(-2.0, -2.02, T) == pytest.approx(0.9, rel=1e-12)
    assert acceptance_probability(3.0, 2.97, T) == pytest.approx(0.9, rel=1e-12)
    assert acceptance_probability(-2.0, -2.02, 1e-6) < 1e-100
    with pytest.raises(ValueError):
        acceptance_probability(-1.0, -2.0, 0.0)


def test_zero_score_uses_eps_with_warning():
    with pytest.warns(UserWarning, match="eps"):
        p = acceptance_probability(0.0, -1e-13, 1.0)
    assert p == pytest.approx(math.exp(-0.1))


def test_params_validation():
    for bad in (dict(M=0), dict(L=0), dict(delta_range=(0.02, 0.01)), dict(temperature=-1.0), dict(score_fn="mean")):
        with pytest.raises(ValueError):
            TixParams(**bad)
    assert TixParams().max_iterations(7) == 350
    assert TixParams(L=9).max_iterations(7) == 9


# -- explainer runs -----------------------------------------------------------------


def test_path_table_is_complete():
    ds, m = _model()
    t = tix(m, ds.numeric[0], TixParams(M=4, seed=1))
    assert t.path_length.shape == (6, 3, 4)
    assert t.L == 300
    assert t.path_length.min() >= 0 and t.path_length.max() <= t.L
    for i in range(3):
        for k in range(4):
            run = t.path_length[:, i, k]
            terminal = run.max()
            removed = run[run < terminal]
            assert np.unique(removed).size == removed.size
            assert (run == terminal).sum() >= 1
    assert t.aggregate.shape == (6,)
    assert sorted(t.order()) == list(range(6))
    assert set(t.rank) <= set(range(1, 7))


def test_single_feature_terminates_immediately():
    ds, m = _model(d=1)
    t = tix(m, ds.numeric[0], TixParams(M=2))
    assert t.path_length.tolist() == [[[0, 0]] * 3]


def test_bagged_model_is_rejected():
    rng = np.random.default_rng(0)
    ds = Dataset(rng.normal(size=(40, 10)), np.zeros((40, 0)))
    m = fit(ds, ModelParams(n_subsamples=2, psi_min=10, psi_max=20))
    with pytest.raises(ValueError, match="bagging"):
        tix(m, ds.numeric[0])


def test_feature_subset_and_query_validation():
    ds, m = _model()
    t = tix(m, ds.numeric[0], TixParams(M=1), features=[4, 1])
    assert t.features == (4, 1) and t.L == 100
    with pytest.raises(ValueError):
        tix(m, ds.numeric[0], features=[1, 1])
    with pytest.raises(ValueError):
        tix(m, ds.numeric[0, :3])


def test_seeded_and_thread_independent():
    ds, m = _model()
    a = tix(m, ds.numeric[2], TixParams(M=3, seed=4))
    b = tix(m, ds.numeric[2], TixParams(M=3, seed=4, n_jobs=3))
    assert np.array_equal(a.path_length, b.path_length)
    c = tix(m, ds.numeric[2], TixParams(M=3, seed=5))
    assert not np.array_equal(a.path_length, c.path_length)


@pytest.mark.parametrize("greedy", [False, True])
@pytest.mark.parametrize("score_fn", [VARIANCE, EXPECTATION])
def test_runner_matches_step_by_step_recomputation(monkeypatch, greedy, score_fn):
    # with batching disabled every proposal is scored on its own, so random draws line up exactly
    monkeypatch.setattr(explain, "_LAZY_PROPOSALS", 10**9)
    # the model's own alpha draws must not leak into the explainer, which scores at alpha = 1
    ds, m = _model(n=50, d=5, seed=2, score=ScoreConfig(alpha_range=(0.6, 1.6)))
    x = ds.numeric[7] + np.array([0.0, 0.8, 0.0, -0.6, 0.0])
    params = TixParams(M=3, L=40, seed=9, greedy=greedy, score_fn=score_fn)
    got = tix(m, x, params).path_length
    for i in range(m.n_subsamples):
        Yn, _ = m.subsample(i)
        for k in range(params.M):
            rng = np.random.default_rng([params.seed, k, i])
            T = temperature_from_delta(rng.uniform(*params.delta_range))
            want = tix_run_by_recomputation(x, Yn, params.L, T, greedy, rng, score_fn)
            assert got[:, i, k].tolist() == want


def test_batched_runner_has_the_same_path_distribution(monkeypatch):
    ds, m = _model(n=40, d=4, seed=6, N=1)
    x = ds.numeric[0] + np.array([0.5, 0.0, 0.0, 0.3])
    params = TixParams(M=1500, L=30, seed=1)
    fast = tix(m, x, params).path_length[:, 0, :].astype(float)
    monkeypatch.setattr(explain, "_LAZY_PROPOSALS", 10**9)
    slow = tix(m, x, TixParams(M=1500, L=30, seed=2)).path_length[:, 0, :].astype(float)
    se = np.sqrt(fast.var(axis=1, ddof=1) / fast.shape[1] + slow.var(axis=1, ddof=1) / slow.shape[1])
    assert np.all(np.abs(fast.mean(axis=1) - slow.mean(axis=1)) < 4.5 * se)
    # which feature goes first is a categorical law; compare its frequencies too
    first_fast = np.bincount(fast.argmin(axis=0).astype(int), minlength=4) / fast.shape[1]
    first_slow = np.bincount(slow.argmin(axis=0).astype(int), minlength=4) / slow.shape[1]
    assert np.all(np.abs(first_fast - first_slow) < 0.06)


def test_fixed_temperature_overrides_delta():
    ds, m = _model()
    a = tix(m, ds.numeric[0], TixParams(M=2, temperature=0.3))
    b = tix(m, ds.numeric[0], TixParams(M=2, temperature=0.3, delta_range=(0.5, 0.9)))
    c = tix(m, ds.numeric[0], TixParams(M=2, delta_range=(0.5, 0.9)))
    assert np.array_equal(a.path_length, b.path_length)
    assert not np.array_equal(a.path_length, c.path_length)


# -- constant-shift features --------------------------------------------------------


def test_shift_difference_matches_recomputation_and_is_negative():
    rng = np.random.default_rng(0)
    profiles = [_random_profile(rng) for _ in range(50)]
    shifts = 10.0 ** np.linspace(-6, 0, 13)
    assert greedy_never_removes(profiles, shifts)
    z = profiles[0]
    assert score_shift_difference(z, 0.0) == 0.0
    dx = 1e-6
    diff = score_shift_difference(z, dx)
    without = z.copy()
    without[1:] -= dx
    assert diff == pytest.approx(expected_splits(z) - expected_splits(without), rel=1e-5)
    assert -dx * np.sum(np.diff(z[1:]) / (z[2:] * (z[2:] - dx))) == pytest.approx(diff, rel=1e-12)


def test_shift_acceptance_tends_to_one():
    rng = np.random.default_rng(3)
    for _ in range(20):
        z = _random_profile(rng)
        f_with = -expected_splits(z)
        p = acceptance_probability(f_with, f_with + score_shift_difference(z, 1e-9), 0.095)
        assert p > 0.9999


def test_shift_difference_validation():
    with pytest.raises(ValueError):
        score_shift_difference([0.0, 1.0, 1.0], 0.1)
    with pytest.raises(ValueError):
        score_shift_difference([0.0, 1.0, 2.0], 1.5)


def test_greedy_keeps_constant_shift_feature():
    rng = np.random.default_rng(11)
    for inst in range(100):
        d, n = int(rng.integers(2, 5)), 25
        X = rng.normal(size=(n, d))
        shifted = int(rng.integers(d))
        X[:, shifted] = 0.0
        ds = Dataset(X, np.zeros((n, 0)))
        m = fit(ds, ModelParams(n_subsamples=2, psi_min=10, psi_max=20, feature_bagging=False, seed=inst))
        x = rng.normal(size=d)
        x[shifted] = 10.0 ** rng.uniform(-6, 0)
        t = tix(m, x, TixParams(M=2, greedy=True, seed=inst, score_fn=EXPECTATION))
        runs = t.path_length.reshape(d, -1)
        assert np.all(runs[shifted] == runs.max(axis=0))


# -- refinement ---------------------------------------------------------------------


@pytest.mark.parametrize("d, beta, k_min, sizes", [
    (100, 1.5, 10, [100, 66, 44, 29, 19, 12, 10]),
    (8, 10.0, 10, [8]),
    (10, 1.5, 10, [10]),
    (12, 1.5, 10, [12, 10]),
    (12, 1.5, 4, [12, 8, 5, 4]),
])
def test_stage_sizes(d, beta, k_min, sizes):
    assert stage_sizes(d, beta, k_min) == sizes


def test_refine_reduces_to_a_single_pass():
    ds, m = _model(d=8)
    params = TixParams(M=2, seed=3)
    r = refine(m, ds.numeric[1], params, RefineParams(beta=10, k_min=10))
    t = tix(m, ds.numeric[1], params)
    assert len(r.stages) == 1
    assert np.array_equal(r.stages[0].path_length, t.path_length)
    assert list(r.order) == t.order()
    assert set(r.offsets.values()) == {0}


def test_refine_offsets_and_scores():
    ds, m = _model(d=12, N=2)
    x = ds.numeric[0]
    params = TixParams(M=2, seed=0)
    add = refine(m, x, params, RefineParams(beta=1.5, k_min=4, mode=ADDITIVE))
    rank = refine(m, x, params, RefineParams(beta=1.5, k_min=4, mode=RANK))
    assert [len(s.features) for s in add.stages] == [12, 8, 5, 4]
    counts = {o: list(add.offsets.values()).count(o) for o in set(add.offsets.values())}
    assert counts == {0: 4, 4: 3, 7: 1, 8: 4}
    last_stage = {0: 0, 4: 1, 7: 2, 8: 3}
    for j, off in add.offsets.items():
        assert add.scores[j] == pytest.approx(add.stages[last_stage[off]].scores()[j] + off)
    assert rank.offsets == add.offsets
    assert sorted(rank.scores.values()) == list(range(1, 13))
    # every survivor of a later stage ranks above every feature dropped earlier
    pos = {j: p for p, j in enumerate(rank.order)}
    for a, oa in rank.offsets.items():
        for b, ob in rank.offsets.items():
            if oa > ob:
                assert pos[a] < pos[b]
    assert list(add.order) == sorted(add.scores, key=lambda j: -add.scores[j])


def test_refine_params_validation():
    for bad in (dict(beta=1.0), dict(k_min=0), dict(mode="sum")):
        with pytest.raises(ValueError):
            RefineParams(**bad)


def test_explanation_csv(tmp_path):
    p = tmp_path / "e.csv"
    write_explanation_csv(p, ["a", "b", "c"], {0: 1.0, 1: 3.0, 2: 2.0}, {1: 5})
    lines = p.read_text().splitlines()
    assert lines[0] == "feature,score,rank,offset"
    assert lines[1:] == ["b,3.0,1,5", "c,2.0,2,0", "a,1.0,3,0"]


# -- minimal subspace ---------------------------------------------------------------


def test_minimal_subspace_is_pessimistic_on_ties():
    assert minimal_subspace({0: 5.0, 1: 5.0, 2: 3.0}, [0]) == 2
    assert minimal_subspace({0: 5.0, 1: 4.0, 2: 3.0}, [0]) == 1
    assert minimal_subspace([1.0, 9.0, 8.0, 2.0], [1, 2]) == 2
    assert minimal_subspace([1.0, 9.0, 8.0, 2.0], [0, 1]) == 4


def test_cross_low_dimension_is_explained():
    g = generate(GeneratorSpec(CROSS, 1000, 5, seed=0))
    (row, rel), = g.relevant.items()
    m = fit(g.dataset, ModelParams(n_subsamples=30, feature_bagging=False, seed=0))
    t = tix(m, g.dataset.numeric[row], TixParams(M=5, seed=0))
    assert minimal_subspace(t.scores(), rel) == 2


def test_more_repetitions_do_not_hurt_on_cross():
    # the mean path length has the same expectation for every M; what more runs buy
    # is a less noisy ranking, so the check is on the minimal subspace
    better = 0
    for seed in range(10):
        g = generate(GeneratorSpec(CROSS, 600, 12, seed=seed))
        (row, rel), = g.relevant.items()
        m = fit(g.dataset, ModelParams(n_subsamples=8, psi_min=50, psi_max=256, feature_bagging=False, seed=seed))
        ms = [minimal_subspace(tix(m, g.dataset.numeric[row], TixParams(M=M, seed=seed)).scores(), rel)
              for M in (1, 5, 10)]
        better += ms[2] <= ms[0]
    assert better >= 8


# -- distance profile plots ---------------------------------------------------------


def test_dpp_quartiles_by_hand():
    (row,) = dpp(np.array([[1.0], [2.0], [3.0], [4.0]]), [0.0], [0])
    assert (row.q1, row.median, row.q3) == (1.75, 2.5, 3.25)
    assert (row.min, row.max, row.lower_whisker, row.upper_whisker, row.isolation_gap) == (1, 4, 1, 4, 1)


def test_dpp_whiskers_exclude_far_points():
    (row,) = dpp(np.array([[1.0], [2.0], [3.0], [4.0], [100.0]]), [0.0], [0])
    assert row.upper_whisker == 4.0 and row.max == 100.0


def test_dpp_single_point():
    (row,) = dpp(np.array([[0.0, 3.0]]), [0.0, 0.0], [1])
    assert row.min == row.q1 == row.median == row.q3 == row.max == 3.0


def test_dpp_drops_the_query_itself():
    ref = np.array([[0.0], [1.0], [2.0]])
    (with_self,) = dpp(ref, [0.0], [0], drop_self=False)
    (without,) = dpp(ref, [0.0], [0])
    assert with_self.min == 0.0 and without.min == 1.0
    assert without.isolation_gap == with_self.isolation_gap == 1.0


def test_dpp_validation():
    with pytest.raises(ValueError):
        dpp(np.array([[1.0]]), [1.0], [0])
    with pytest.raises(ValueError):
        dpp(np.ones((3, 2)), [0.0, 0.0], [0, 0])
    with pytest.raises(ValueError):
        dpp(np.ones((3, 2)), [0.0, 0.0], [0, 1], m_max=3)


def test_dpp_on_model_and_outputs(tmp_path):
    ds, m = _model(d=4)
    rows = dpp(m, ds.numeric[3], [2, 0, 1], m_max=2)
    again = dpp(m, ds.numeric[3], [2, 0, 1], m_max=2)
    assert rows == again
    assert [r.m for r in rows] == [1, 2] and [r.feature for r in rows] == [2, 0]
    for r in rows:
        assert r.min <= r.q1 <= r.median <= r.q3 <= r.max
        assert r.min <= r.lower_whisker <= r.upper_whisker <= r.max
    write_dpp_csv(rows, tmp_path / "d.csv", ["a", "b", "c", "d"])
    assert (tmp_path / "d.csv").read_text().splitlines()[1].startswith("1,c,")
    write_dpp_svg(rows, tmp_path / "d.svg")
    assert (tmp_path / "d.svg").read_text().count("<rect") == 2


@pytest.mark.parametrize("seed", range(5))
def test_dpp_gap_jumps_when_the_hidden_subspace_completes(seed):
    # nearest-neighbour distances grow with the prefix size for every point, so each
    # outlier gap is divided by the inlier median at the same prefix before comparing jumps
    subs = (((2, 3, 4), 10),)
    g = generate(GeneratorSpec(HIDDEN, 1000, 8, subs, seed=seed))
    X, lab = g.dataset.numeric, g.dataset.labels
    order = [2, 3, 4, 0, 1, 5, 6, 7]
    inlier_gap = []
    for m in (1, 2, 3):
        D = cdist(X[:, order[:m]], X[:, order[:m]], "cityblock")
        np.fill_diagonal(D, np.inf)
        inlier_gap.append(np.median(D.min(axis=1)[lab == 0]))
    excess = []
    for row in g.relevant:
        gap = np.array([r.isolation_gap for r in dpp(X, X[row], order, m_max=3)]) / inlier_gap
        excess.append(math.log(gap[2] / gap[1]) - math.log(gap[1] / gap[0]))
    assert np.median(excess) > 0
