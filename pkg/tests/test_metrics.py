import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from giks.data import Dataset, ResponseOracle
from giks.errors import UnavailableMetricError
from giks.metrics import (amse, betainc_regularized, cf_error, dpe, evaluate, factual_rmse, hsic,
                          hsic_permutation_null, paired_t_statistic, paired_ttest_onesided, student_t_sf)


class FnModel:
    def __init__(self, fn):
        self.fn = fn

    def predict(self, X, t):
        return self.fn(np.asarray(X), np.asarray(t))


def wavy(X, t):
    return np.sin(3 * t) * X[:, 0] + X[:, 1] * t ** 2


ORACLE = ResponseOracle(wavy)


def dataset(n=40, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, 2))
    t = rng.uniform(size=n)
    return Dataset(X, t, wavy(X, t) + rng.normal(scale=0.1, size=n))


def test_factual_rmse_examples():
    ds = dataset()
    assert factual_rmse(FnModel(lambda X, t: ds.y), ds) == 0.0
    shifted = Dataset(ds.X, ds.t, ds.y + 0.0)
    assert factual_rmse(FnModel(lambda X, t: shifted.y - 0.3), shifted) == pytest.approx(0.3)
    tiny = Dataset(np.zeros((3, 1)), np.array([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 3.0]))
    # errors 1, 0, -2 -> sqrt(5/3)
    assert factual_rmse(FnModel(lambda X, t: np.array([0.0, 2.0, 5.0])), tiny) == pytest.approx(math.sqrt(5 / 3))


def test_cf_error_examples():
    ds = dataset()
    assert cf_error(FnModel(wavy), ds, ORACLE) == 0.0
    offset = FnModel(lambda X, t: wavy(X, t) + t)
    assert abs(cf_error(offset, ds, ORACLE) - math.sqrt(1 / 3)) <= 1e-3
    with pytest.raises(UnavailableMetricError):
        cf_error(offset, ds, None)
    with pytest.raises(ValueError):
        cf_error(offset, ds, ORACLE, grid_size=1)


def test_cf_error_grid_refinement(simple_data):
    from giks.trainer import GiksConfig, build_model, pretrain_factual
    from giks.data import standardize_outcomes
    train, _, test, oracle = simple_data
    cfg = GiksConfig(pretrain_epochs=20)
    m = build_model(train.d, cfg)
    m.y_mean, m.y_std = standardize_outcomes(train.y)
    pretrain_factual(m, train, cfg)
    assert abs(cf_error(m, test, oracle, 65) - cf_error(m, test, oracle, 129)) < 1e-3


def test_cf_error_moves_toward_oracle():
    ds = dataset()
    base = lambda X, t: np.cos(2 * t) * X[:, 1]
    vals = [cf_error(FnModel(lambda X, t, a=a: a * wavy(X, t) + (1 - a) * base(X, t)), ds, ORACLE)
            for a in (0.0, 0.5, 1.0)]
    assert vals[0] >= vals[1] >= vals[2] == 0.0


def test_amse_examples():
    ds = dataset()
    pool = np.random.default_rng(1).uniform(size=500)
    assert amse(FnModel(wavy), ds, ORACLE, pool) == 0.0
    assert amse(FnModel(lambda X, t: wavy(X, t) - 0.7), ds, ORACLE, pool) == pytest.approx(0.49)


def test_amse_matches_cf_error_squared_with_uniform_treatments():
    ds = dataset(200)
    model = FnModel(lambda X, t: wavy(X, t) + X[:, 0] * t - 0.2)
    pool = np.random.default_rng(2).uniform(size=5000)
    a = amse(model, ds, ORACLE, pool, seed=3)
    assert a == pytest.approx(cf_error(model, ds, ORACLE) ** 2, rel=0.05)


def test_dpe_hand_fixture():
    oracle = ResponseOracle(lambda X, t: -(t - 0.6) ** 2)
    ds = Dataset(np.zeros((1, 1)), np.array([0.5]), np.array([0.0]))
    model = FnModel(lambda X, t: -(t - 0.4) ** 2)
    assert dpe(model, ds, oracle) == pytest.approx(0.0016, rel=1e-9)
    assert dpe(FnModel(lambda X, t: -(t - 0.6) ** 2 + 5.0), ds, oracle) == 0.0


@given(st.floats(0.01, 100))
@settings(max_examples=20, deadline=None)
def test_dpe_argmax_scale_invariance(c):
    ds = dataset(20)
    model = FnModel(lambda X, t: np.sin(5 * t + X[:, 0]))
    scaled = FnModel(lambda X, t: c * np.sin(5 * t + X[:, 0]))
    assert dpe(model, ds, ORACLE) == dpe(scaled, ds, ORACLE)


def test_metrics_invariant_to_instance_order():
    ds = dataset(30)
    perm = np.random.default_rng(4).permutation(30)
    shuffled = Dataset(ds.X[perm], ds.t[perm], ds.y[perm])
    model = FnModel(lambda X, t: wavy(X, t) + 0.3 * X[:, 0] * np.cos(4 * t))
    pool = np.random.default_rng(5).uniform(size=100)
    assert cf_error(model, ds, ORACLE) == pytest.approx(cf_error(model, shuffled, ORACLE), rel=1e-12)
    assert amse(model, ds, ORACLE, pool) == pytest.approx(amse(model, shuffled, ORACLE, pool), rel=1e-12)
    assert dpe(model, ds, ORACLE) == pytest.approx(dpe(model, shuffled, ORACLE), rel=1e-12)


def test_evaluate_degraded_mode():
    ds = dataset()
    report = evaluate(FnModel(wavy), ds)
    assert report.cf_error is None and set(report.unavailable) == {"cf_error", "amse", "dpe"}
    full = evaluate(FnModel(lambda X, t: wavy(X, t) + 0.1), ds, ORACLE, with_dpe=True)
    for v in (full.factual_rmse, full.cf_error, full.amse, full.dpe):
        assert v >= 0


# -- HSIC ---------------------------------------------------------------------


def naive_hsic(A, B):
    """Loop-based V-statistic with explicit H K H centering."""
    n = len(A)

    def gram(Z):
        d = np.array([[np.sum((Z[i] - Z[j]) ** 2) for j in range(n)] for i in range(n)])
        med = np.median(np.sqrt(d[np.triu_indices(n, 1)]))
        s = med if med > 0 else 1.0
        return np.exp(-d / (2 * s * s))
    H = np.eye(n) - np.ones((n, n)) / n
    return np.trace(H @ gram(A) @ H @ H @ gram(B) @ H) / (n - 1) ** 2


def test_hsic_matches_naive_oracle():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(25, 3))
    B = A[:, :1] ** 2 + rng.normal(size=(25, 1))
    assert hsic(A, B) == pytest.approx(naive_hsic(A, B), rel=1e-10)


def test_hsic_constant_and_identical_rows():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(30, 2))
    assert hsic(A, np.ones(30)) == pytest.approx(0.0, abs=1e-15)
    assert hsic(np.ones((30, 2)), A) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        hsic(A[:3], A[:3])


def test_hsic_permutation_null_and_dependence():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(500, 2))
    B = rng.normal(size=(500, 1))
    assert hsic(A, B) < np.percentile(hsic_permutation_null(A, B, 200, seed=0), 95)
    assert hsic(A, A) > np.percentile(hsic_permutation_null(A, A, 200, seed=0), 99)


@given(st.integers(0, 1000))
@settings(max_examples=15, deadline=None)
def test_hsic_symmetry_and_joint_permutation(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(20, 2))
    B = A[:, :1] + rng.normal(size=(20, 1))
    perm = rng.permutation(20)
    h = hsic(A, B)
    assert hsic(B, A) == pytest.approx(h, rel=1e-10)
    assert hsic(A[perm], B[perm]) == pytest.approx(h, rel=1e-10)
    assert h >= 0


# -- paired t-test ---------------------------------------------------------------


def test_ttest_conventions():
    a = np.array([0.3, 0.5, 0.2])
    assert paired_ttest_onesided(a, a) == 0.5
    assert paired_ttest_onesided(a + 1, a) == 0.0
    assert paired_ttest_onesided(a, a + 1) == 1.0
    with pytest.raises(ValueError):
        paired_ttest_onesided([1, 2, 3], [1, 2])


def test_ttest_fixture():
    diffs = np.array([1.2, 0.8, 1.1, 0.9, 1.0])
    b = np.zeros(5)
    assert paired_t_statistic(diffs, b) == pytest.approx(1.0 / (math.sqrt(0.025) / math.sqrt(5)))
    assert paired_t_statistic(diffs, b) == pytest.approx(14.142, abs=1e-3)
    p = paired_ttest_onesided(diffs, b)
    # t-table: df=4, one-sided 0.001 critical value is 7.173
    assert p < 1e-3
    assert p == pytest.approx(stats.ttest_rel(diffs, b, alternative="greater").pvalue, rel=1e-9)


@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=2, max_size=30))
@settings(max_examples=100, deadline=None)
def test_ttest_matches_scipy(pairs):
    a, b = np.array(pairs).T
    d = a - b
    p = paired_ttest_onesided(a, b)
    assert 0.0 <= p <= 1.0
    if d.var(ddof=1) > 1e-12 * max(1.0, np.abs(d).max() ** 2):
        assert p == pytest.approx(stats.ttest_rel(a, b, alternative="greater").pvalue, rel=1e-8, abs=1e-12)


@given(st.floats(0.05, 50), st.floats(0.05, 50), st.floats(0, 1))
@settings(max_examples=200, deadline=None)
def test_betainc_matches_scipy(a, b, x):
    assert betainc_regularized(a, b, x) == pytest.approx(special.betainc(a, b, x), rel=1e-9, abs=1e-13)


@given(st.floats(-50, 50), st.integers(1, 200))
@settings(max_examples=100, deadline=None)
def test_student_t_sf_matches_scipy(t, df):
    assert student_t_sf(t, df) == pytest.approx(stats.t.sf(t, df), rel=1e-8, abs=1e-14)
