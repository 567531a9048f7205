import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stratcausal.dml import (
    NuisanceEstimates,
    crossfit_nuisances,
    dml_ate,
    dr_score,
    dr_scores,
    estimate_ate,
    fold_ids,
    propensity_histogram,
    trim,
)
from stratcausal.forest import ForestParams

FAST = ForestParams(n_trees=50)


def test_fold_ids_balanced_and_fixed():
    f = fold_ids(100, 3, seed=4)
    assert sorted(np.bincount(f)) == [33, 33, 34]
    assert np.array_equal(f, fold_ids(100, 3, seed=4))
    assert not np.array_equal(f, fold_ids(100, 3, seed=5))
    assert np.array_equal(np.sort(fold_ids(10, 10, 0)), np.arange(10))
    with pytest.raises(ValueError):
        fold_ids(5, 1, 0)
    with pytest.raises(ValueError):
        fold_ids(5, 6, 0)


def test_constant_outcome_nuisances():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((120, 3))
    dt = rng.integers(0, 2, 120)
    nui = crossfit_nuisances(X, np.ones(120), dt, params=FAST)
    assert np.all(nui.mu0 == 1.0) and np.all(nui.mu1 == 1.0)


def test_coin_flip_propensity():
    # per-observation closeness needs leaves that are large relative to n
    rng = np.random.default_rng(1)
    n = 20000
    X = rng.standard_normal((n, 3))
    dt = rng.integers(0, 2, n)
    nui = crossfit_nuisances(X, np.zeros(n), dt, params=ForestParams(n_trees=5),
                             propensity_params=ForestParams(n_trees=100, min_node_size=1000))
    assert np.all(np.abs(nui.p1 - 0.5) < 0.05)
    assert abs(nui.p1.mean() - 0.5) < 0.01


def test_coin_flip_propensity_default_leaves_mean():
    rng = np.random.default_rng(1)
    n = 3000
    X = rng.standard_normal((n, 3))
    dt = rng.integers(0, 2, n)
    nui = crossfit_nuisances(X, np.zeros(n), dt, params=ForestParams(n_trees=5),
                             propensity_params=ForestParams(n_trees=100, min_node_size=10))
    assert abs(nui.p1.mean() - dt.mean()) < 0.02


def test_cross_fitting_excludes_own_fold():
    # a forest fit on other folds cannot reproduce an outcome that is pure noise
    rng = np.random.default_rng(2)
    n = 300
    X = rng.standard_normal((n, 2))
    dt = rng.integers(0, 2, n)
    y = rng.standard_normal(n)
    nui = crossfit_nuisances(X, y, dt, params=FAST, seed=1)
    assert np.corrcoef(np.where(dt == 1, nui.mu1, nui.mu0), y)[0, 1] < 0.3
    assert np.array_equal(nui.fold, fold_ids(n, 3, 1))


def test_leave_one_out_smoke():
    X = np.arange(10, dtype=float).reshape(-1, 1)
    dt = np.array([0, 1] * 5)
    nui = crossfit_nuisances(X, X[:, 0] / 10, dt, k_folds=10, params=ForestParams(n_trees=10))
    assert len(nui) == 10 and np.all((nui.p1 > 0) & (nui.p1 < 1))


def test_single_arm_fold_refused():
    X = np.zeros((6, 1))
    dt = np.array([1, 0, 0, 0, 0, 0])
    with pytest.raises(ValueError, match="fewer folds"):
        crossfit_nuisances(X, np.zeros(6), dt, k_folds=6, params=ForestParams(n_trees=5))
    with pytest.raises(ValueError):
        crossfit_nuisances(X, np.zeros(6), np.full(6, 2), params=ForestParams(n_trees=5))


def test_trim_rule():
    assert list(trim([0.005, 0.5, 0.995], 0.01)) == [1]
    assert list(trim([0.01, 0.99, 0.3])) == [0, 1, 2]
    with pytest.raises(ValueError):
        trim([0.001, 0.999], 0.01)
    with pytest.raises(ValueError):
        trim([0.0, 0.5])


@given(st.lists(st.floats(1e-6, 1 - 1e-6), min_size=1, max_size=50))
def test_trim_monotone(p):
    p = np.asarray(p + [0.5])
    loose = set(trim(p, 0.01).tolist())
    tight = set(trim(p, 0.05).tolist())
    assert tight <= loose


def test_dr_score_hand_values():
    assert dr_score(0.5, 1, 0.5, 0.5, 0.3) == 0.0
    assert dr_score(1, 1, 0.2, 0.5, 0.5) == pytest.approx(1.3, abs=1e-15)
    assert dr_score(0, 0, 0.5, 0.5, 0.5) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        dr_scores([1], [1], [0], [0], [1.0])


def test_estimate_ate():
    r = estimate_ate(np.full(40, 0.7), n_trimmed=3, threshold=0.01)
    assert r.ate == 0.7 and r.se == 0.0 and r.n == 43
    with pytest.warns(RuntimeWarning):
        estimate_ate([0.1, 0.2])
    with pytest.raises(ValueError):
        estimate_ate([])
    s = np.random.default_rng(0).standard_normal(100)
    r = estimate_ate(s)
    assert r.se == pytest.approx(s.std(ddof=1) / 10)


@settings(max_examples=30)
@given(st.integers(0, 10**6))
def test_estimate_ate_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    s = rng.integers(-8, 8, 64) / 4.0  # dyadic values: sums are exact
    a = estimate_ate(s)
    b = estimate_ate(rng.permutation(s))
    assert a.ate == b.ate


def test_dml_with_given_nuisances():
    n = 60
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, n).astype(float)
    dt = rng.integers(0, 2, n)
    p1 = np.full(n, 0.5)
    p1[0] = 0.001
    nui = NuisanceEstimates(np.zeros(n), np.zeros(n), p1, np.zeros(n, dtype=int))
    res, _, kept, s = dml_ate(None, y, dt, threshold=0.01, nuisances=nui)
    assert res.n_trimmed == 1 and res.n_used == n - 1 and 0 not in kept
    want = np.mean((dt * y / 0.5 - (1 - dt) * y / 0.5)[1:])
    assert res.ate == pytest.approx(want, abs=1e-14)


def test_dml_recovers_effect():
    rng = np.random.default_rng(4)
    n = 2000
    X = rng.standard_normal((n, 3))
    p = 1 / (1 + np.exp(-0.8 * X[:, 0]))
    dt = (rng.uniform(size=n) < p).astype(int)
    y = X[:, 0] + 0.5 * X[:, 1] + 1.0 * dt + rng.standard_normal(n)
    res, nui, kept, _ = dml_ate(X, y, dt, params=ForestParams(n_trees=100), seed=2)
    assert abs(res.ate - 1.0) < 4 * res.se
    # same seed, same answer
    res2, *_ = dml_ate(X, y, dt, params=ForestParams(n_trees=100), seed=2)
    assert res2.ate == res.ate


def test_propensity_histogram():
    edges, t, c = propensity_histogram([0.1, 0.15, 0.9, 1 - 1e-6], [1, 0, 1, 0], bins=10)
    assert edges.size == 11 and t.sum() == 2 and c.sum() == 2
    assert t[1] == 1 and c[-1] == 1
