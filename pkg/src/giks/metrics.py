"""Evaluation metrics, HSIC dependence, and the one-sided paired t-test.

``model`` arguments are anything with ``predict(X, t)``; ``oracle`` arguments
provide ``mu(X, t)`` and ``best_dose(X)`` (see :class:`giks.data.ResponseOracle`).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DOSE_GRID, Dataset
from .errors import UnavailableMetricError


def _require(oracle):
    if oracle is None:
        raise UnavailableMetricError("metric needs a response oracle")


def _curves(model, X, grid):
    n, g = X.shape[0], len(grid)
    return model.predict(np.repeat(X, g, axis=0), np.tile(grid, n)).reshape(n, g)


def factual_rmse(model, test: Dataset):
    return float(np.sqrt(np.mean((test.y - model.predict(test.X, test.t)) ** 2)))


def midpoint_grid(grid_size=65):
    return (np.arange(grid_size) + 0.5) / grid_size


def cf_error(model, test: Dataset, oracle, grid_size=65):
    """Root of the per-instance squared error integrated over uniform treatments."""
    _require(oracle)
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    grid = midpoint_grid(grid_size)
    err = _curves(model, test.X, grid) - oracle.curves(test.X, grid)
    return float(np.sqrt(np.mean(err ** 2)))


def amse(model, test: Dataset, oracle, train_treatments, n_draws=200, seed=0):
    """Mean squared error over treatments drawn from the training marginal (no root).

    Each instance gets its own draws; rows of the draw matrix are handed out
    in lexicographic order of the covariates, so the value does not depend on
    the order of ``test``.
    """
    _require(oracle)
    pool = np.asarray(train_treatments, dtype=np.float64)
    n = len(test)
    draws = np.random.default_rng(seed).choice(pool, size=(n, n_draws), replace=True)
    t = np.empty_like(draws)
    t[np.lexsort(test.X.T[::-1])] = draws
    Xr = np.repeat(test.X, n_draws, axis=0)
    err = model.predict(Xr, t.ravel()) - oracle.mu(Xr, t.ravel())
    return float(np.mean(err ** 2))


def dpe(model, test: Dataset, oracle, grid=DOSE_GRID):
    """Dosage policy error: squared outcome gap between true and predicted best dose."""
    _require(oracle)
    grid = np.asarray(grid)
    t_hat = grid[np.argmax(_curves(model, test.X, grid), axis=1)]
    t_star = oracle.best_dose(test.X, grid)
    return float(np.mean((oracle.mu(test.X, t_star) - oracle.mu(test.X, t_hat)) ** 2))


def adrf_curves(model, X, grid_size=65):
    grid = midpoint_grid(grid_size)
    return grid, _curves(model, np.atleast_2d(X), grid)


# --------------------------------------------------------------------------
# HSIC


def _pairwise_sq(A):
    sq = np.sum(A * A, axis=1)
    return np.maximum(sq[:, None] + sq[None, :] - 2.0 * A @ A.T, 0.0)


def median_bandwidth(A):
    d2 = _pairwise_sq(A)
    iu = np.triu_indices(A.shape[0], k=1)
    med = float(np.median(np.sqrt(d2[iu]))) if iu[0].size else 0.0
    return med if med > 0 else 1.0


def rbf_gram(A, bandwidth=None):
    A = np.asarray(A, dtype=np.float64)
    A = A.reshape(A.shape[0], -1)
    s = median_bandwidth(A) if bandwidth is None else bandwidth
    return np.exp(-_pairwise_sq(A) / (2.0 * s * s))


def _center(K):
    return K - K.mean(axis=0, keepdims=True) - K.mean(axis=1, keepdims=True) + K.mean()


def hsic_from_grams(K, L):
    n = K.shape[0]
    return float(np.sum(_center(K) * _center(L)) / (n - 1) ** 2)


def hsic(A, B):
    """Biased HSIC with RBF kernels and median-heuristic bandwidths."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    A = A.reshape(A.shape[0], -1)
    B = B.reshape(B.shape[0], -1)
    if A.shape[0] != B.shape[0]:
        raise ValueError("A and B need the same number of rows")
    if A.shape[0] < 4:
        raise ValueError("hsic needs at least 4 rows")
    return hsic_from_grams(rbf_gram(A), rbf_gram(B))


def hsic_permutation_null(A, B, n_perm=200, seed=0):
    """HSIC values after shuffling the rows of ``B`` (bandwidths held fixed)."""
    A = np.asarray(A, dtype=np.float64).reshape(len(A), -1)
    B = np.asarray(B, dtype=np.float64).reshape(len(B), -1)
    Kc = _center(rbf_gram(A))
    L = rbf_gram(B)
    n = A.shape[0]
    rng = np.random.default_rng(seed)
    out = np.empty(n_perm)
    for i in range(n_perm):
        p = rng.permutation(n)
        out[i] = np.sum(Kc * _center(L[np.ix_(p, p)])) / (n - 1) ** 2
    return out


# --------------------------------------------------------------------------
# Student t via the regularized incomplete beta function


def _betacf(a, b, x, max_iter=300, eps=3e-16):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc_regularized(a, b, x):
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t, df):
    """Upper tail ``P(T > t)`` of Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    t2 = t * t
    if t2 < df:
        # near t = 0 use the complementary argument to keep precision
        tail = 0.5 * (1.0 - betainc_regularized(0.5, df / 2.0, t2 / (df + t2)))
    else:
        tail = 0.5 * betainc_regularized(df / 2.0, 0.5, df / (df + t2))
    return tail if t > 0 else 1.0 - tail


def paired_ttest_onesided(errors_a, errors_b):
    """p-value for ``mean(a) > mean(b)`` from the paired t statistic.

    All-zero differences give 0.5; a constant positive (negative) difference
    gives 0 (1).
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("need at least two pairs")
    diff = a - b
    n = diff.size
    mean = float(diff.mean())
    var = float(diff.var(ddof=1))
    if var < 1e-24:
        if mean > 0:
            return 0.0
        return 0.5 if mean == 0 else 1.0
    t = mean / math.sqrt(var / n)
    return float(student_t_sf(t, n - 1))


def paired_t_statistic(errors_a, errors_b):
    diff = np.asarray(errors_a, dtype=np.float64) - np.asarray(errors_b, dtype=np.float64)
    return float(diff.mean() / math.sqrt(diff.var(ddof=1) / diff.size))


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    factual_rmse: float
    cf_error: float | None = None
    amse: float | None = None
    dpe: float | None = None
    hsic_observed: float | None = None
    hsic_augmented: float | None = None
    per_seed: dict = field(default_factory=dict)
    p_values: dict = field(default_factory=dict)
    unavailable: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def evaluate(model, test: Dataset, oracle=None, train_treatments=None, grid_size=65,
             amse_draws=200, seed=0, with_dpe=True):
    """All metrics available for ``test``; oracle-dependent ones are listed as unavailable without one."""
    report = MetricsReport(factual_rmse(model, test))
    if oracle is None:
        report.unavailable = ["cf_error", "amse", "dpe"]
        return report
    report.cf_error = cf_error(model, test, oracle, grid_size)
    pool = test.t if train_treatments is None else train_treatments
    report.amse = amse(model, test, oracle, pool, amse_draws, seed)
    if with_dpe:
        report.dpe = dpe(model, test, oracle)
    return report


# --------------------------------------------------------------------------
# diagnostics


def augmented_hsic(X, t, aug_index, aug_t):
    """``hsic(X, t)`` on observed pairs and on observed plus augmented pairs.

    ``aug_index`` refers to rows of ``X``; each augmented pair is
    ``(X[aug_index[k]], aug_t[k])``. Returns ``(observed, augmented)``; the
    second is ``None`` without augmented pairs.
    """
    X = np.asarray(X, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    observed = hsic(X, t)
    aug_index = np.asarray(aug_index, dtype=int)
    if aug_index.size == 0:
        return observed, None
    Xa = np.vstack([X, X[aug_index]])
    ta = np.concatenate([t, np.asarray(aug_t, dtype=np.float64)])
    return observed, hsic(Xa, ta)


def gp_vs_factual_errors(model, train: Dataset, oracle, gp_config, t_cf):
    """Squared errors against the oracle at ``(x_i, t_cf_i)`` for GP pseudo-outcomes and the model.

    The GP uses the model's embeddings of ``train`` with its standardized
    outcomes; rows without neighbours are dropped from both arrays.
    """
    from .gp import NeighborGP

    emb = model.encode(train.X)
    ys = (train.y - model.y_mean) / model.y_std
    means, _, counts = NeighborGP(emb, train.t, ys, gp_config).query(emb, t_cf)
    ok = counts > 0
    truth = oracle.mu(train.X[ok], t_cf[ok])
    gp_err = (model.y_mean + model.y_std * means[ok] - truth) ** 2
    model_err = (model.predict(train.X[ok], t_cf[ok]) - truth) ** 2
    return gp_err, model_err
