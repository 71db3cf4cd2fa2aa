"""Kernel smoothing of counterfactual outcomes with a GP over embeddings.

For a query treatment ``t_cf`` the training rows whose observed treatment
lies within ``eps_gp`` form the GP training set; the posterior at the query
embedding gives a pseudo-outcome and a variance used to down-weight
unreliable inferences.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import NoNeighborsError, NumericalError

_NORM_FLOOR = 1e-12


class KernelKind(str, enum.Enum):
    COSINE = "cosine"
    DOT = "dot"


@dataclass(frozen=True)
class GPConfig:
    kernel: KernelKind = KernelKind.COSINE
    sigma2: float = 0.5
    eps_gp: float = 0.1
    max_neighbors: int = 200

    def __post_init__(self):
        object.__setattr__(self, "kernel", KernelKind(self.kernel))
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if not 0 < self.eps_gp <= 1:
            raise ValueError("eps_gp must lie in (0, 1]")
        if self.max_neighbors < 1:
            raise ValueError("max_neighbors must be >= 1")


@dataclass(frozen=True)
class GPPosterior:
    mean: float
    variance: float
    neighbor_count: int
    raw_variance: float = 0.0


def kernel_matrix(A, B, kind=KernelKind.COSINE):
    """Gram matrix between the rows of ``A`` and ``B``."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    G = A @ B.T
    if KernelKind(kind) is KernelKind.DOT:
        return G
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    ok = (na >= _NORM_FLOOR)[:, None] & (nb >= _NORM_FLOOR)[None, :]
    denom = np.where(ok, np.outer(na, nb), 1.0)
    return np.where(ok, G / denom, 0.0)


def select_neighbors(treatments, t_cf, eps_gp, max_neighbors=200):
    """Indices with ``|t_cf - t_j| <= eps_gp``, closest ``max_neighbors`` kept."""
    treatments = np.asarray(treatments, dtype=np.float64)
    dist = np.abs(treatments - t_cf)
    idx = np.flatnonzero(dist <= eps_gp)
    if idx.size > max_neighbors:
        # stable sort on distance keeps lower indices first among ties
        order = np.argsort(dist[idx], kind="stable")[:max_neighbors]
        idx = np.sort(idx[order])
    return idx


def posterior_from_gram(k_qq, k_star, K_nn, y_nn, sigma2):
    """Posterior mean and variance given precomputed kernel blocks.

    Returns ``(mean, variance, raw_variance)``; ``variance`` is clamped at 0.
    """
    k_star = np.asarray(k_star, dtype=np.float64)
    y_nn = np.asarray(y_nn, dtype=np.float64)
    m = k_star.shape[0]
    if m == 0:
        raise NoNeighborsError("GP posterior needs at least one neighbor")
    V = np.array(K_nn, dtype=np.float64)
    V[np.diag_indices(m)] += sigma2
    factor = None
    jitter = 0.0
    for attempt in range(4):
        try:
            Vj = V if jitter == 0.0 else V + jitter * np.eye(m)
            factor = cho_factor(Vj, lower=True, check_finite=False)
            if not np.all(np.isfinite(factor[0])):
                raise LinAlgError("non-finite factor")
            break
        except LinAlgError:
            jitter = 1e-8 if jitter == 0.0 else jitter * 10
    if factor is None:
        raise NumericalError("GP Gram matrix not positive definite after jitter retries")
    alpha = cho_solve(factor, np.column_stack([y_nn, k_star]), check_finite=False)
    mean = float(k_star @ alpha[:, 0])
    raw = float(k_qq - k_star @ alpha[:, 1])
    return mean, max(raw, 0.0), raw


def gp_posterior(query_embed, neighbor_embeds, neighbor_y, config: GPConfig) -> GPPosterior:
    neighbor_embeds = np.atleast_2d(np.asarray(neighbor_embeds, dtype=np.float64))
    neighbor_y = np.asarray(neighbor_y, dtype=np.float64)
    if neighbor_y.size == 0:
        raise NoNeighborsError("GP posterior needs at least one neighbor")
    q = np.asarray(query_embed, dtype=np.float64).reshape(1, -1)
    k_qq = kernel_matrix(q, q, config.kernel)[0, 0]
    k_star = kernel_matrix(q, neighbor_embeds, config.kernel)[0]
    K_nn = kernel_matrix(neighbor_embeds, neighbor_embeds, config.kernel)
    mean, var, raw = posterior_from_gram(k_qq, k_star, K_nn, neighbor_y, config.sigma2)
    return GPPosterior(mean, var, int(neighbor_y.size), raw)


def ks_weights(variances):
    """Softmax of negative variances, shifted for stability."""
    v = np.asarray(variances, dtype=np.float64)
    z = -(v - v.min())
    w = np.exp(z)
    return w / w.sum()


class NeighborGP:
    """Batch GP queries against a fixed snapshot of training embeddings.

    The training Gram matrix is built once; each query only slices it.
    """

    def __init__(self, train_embeds, train_t, train_y, config: GPConfig):
        self.config = config
        self.train_t = np.asarray(train_t, dtype=np.float64)
        self.train_y = np.asarray(train_y, dtype=np.float64)
        self.embeds = np.asarray(train_embeds, dtype=np.float64)
        self.gram = kernel_matrix(self.embeds, self.embeds, config.kernel)

    def query(self, query_embeds, t_cf):
        """Posterior mean/variance per query; NaN where no neighbors exist."""
        q = np.atleast_2d(np.asarray(query_embeds, dtype=np.float64))
        t_cf = np.atleast_1d(np.asarray(t_cf, dtype=np.float64))
        cross = kernel_matrix(q, self.embeds, self.config.kernel)
        self_k = np.diag(kernel_matrix(q, q, self.config.kernel)) if self.config.kernel is KernelKind.DOT \
            else (np.linalg.norm(q, axis=1) >= _NORM_FLOOR).astype(float)
        means = np.full(len(t_cf), np.nan)
        variances = np.full(len(t_cf), np.nan)
        counts = np.zeros(len(t_cf), dtype=int)
        for i, tc in enumerate(t_cf):
            idx = select_neighbors(self.train_t, tc, self.config.eps_gp, self.config.max_neighbors)
            if idx.size == 0:
                continue
            m, v, _ = posterior_from_gram(self_k[i], cross[i, idx], self.gram[np.ix_(idx, idx)],
                                          self.train_y[idx], self.config.sigma2)
            means[i], variances[i], counts[i] = m, v, idx.size
        return means, variances, counts
