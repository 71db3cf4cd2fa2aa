"""Counterfactual treatment sampling and pseudo-outcome losses.

Sampled treatments close to the observed one (``|t_cf - t| < delta``) get a
first-order Taylor pseudo-outcome (gradient interpolation, GI); the rest get
a GP posterior over embedding-space neighbours whose observed treatment is
near ``t_cf`` (kernel smoothing, KS), weighted by a softmax of negative
posterior variance. All pseudo-targets are constants for differentiation.
"""
from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffnet as dn
from .gp import GPConfig, NeighborGP, ks_weights

logger = logging.getLogger(__name__)

N_BINS = 10
PROPENSITY_FLOOR = 0.01


class SamplerKind(str, enum.Enum):
    UNIFORM = "uniform"
    MARGINAL = "marginal"
    INVERSE_PROPENSITY = "inverse-propensity"


class Route(enum.IntEnum):
    NEAR = 0
    FAR = 1


def treatment_bins(t, n_bins=N_BINS):
    return np.minimum((np.asarray(t) * n_bins).astype(int), n_bins - 1)


class PropensityModel:
    """One-hidden-layer softmax classifier predicting the treatment bin."""

    def __init__(self, input_dim, hidden=50, n_bins=N_BINS, seed=0):
        rng = np.random.default_rng(seed)
        b1, b2 = 1 / np.sqrt(input_dim), 1 / np.sqrt(hidden)
        self.n_bins = n_bins
        self.blocks = [
            dn.ParamBlock("prop.W1", rng.uniform(-b1, b1, (input_dim, hidden))),
            dn.ParamBlock("prop.b1", rng.uniform(-b1, b1, (1, hidden))),
            dn.ParamBlock("prop.W2", rng.uniform(-b2, b2, (hidden, n_bins))),
            dn.ParamBlock("prop.b2", rng.uniform(-b2, b2, (1, n_bins))),
        ]
        self.x_mean = np.zeros(input_dim)
        self.x_std = np.ones(input_dim)

    def _logits(self, X) -> dn.Node:
        W1, b1, W2, b2 = self.blocks
        Xs = (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_std
        return dn.affine(dn.relu(dn.affine(Xs, W1, b1)), W2, b2)

    def predict_proba(self, X):
        z = self._logits(X).value
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def accuracy(self, X, t):
        return float(np.mean(np.argmax(self.predict_proba(X), axis=1) == treatment_bins(t, self.n_bins)))


def fit_propensity(X, treatments, epochs=100, batch_size=128, learning_rate=1e-2, seed=0):
    """Train a :class:`PropensityModel` with cross-entropy for a fixed number of epochs."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 10:
        raise ValueError("propensity fitting needs at least 10 rows")
    labels = treatment_bins(treatments)
    model = PropensityModel(X.shape[1], seed=seed)
    model.x_mean = X.mean(axis=0)
    sd = X.std(axis=0)
    model.x_std = np.where(sd > 1e-12, sd, 1.0)
    opt = dn.AdamW(model.blocks, dn.OptimizerConfig(learning_rate=learning_rate, weight_decay=0.0))
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            opt.zero_grad()
            dn.backward(dn.softmax_xent(model._logits(X[idx]), labels[idx]))
            opt.step()
    return model


def inverse_propensity_bin_probs(proba):
    """Bin sampling probabilities proportional to ``1 / max(pi, floor)``."""
    w = 1.0 / np.clip(proba, PROPENSITY_FLOOR, 1.0)
    return w / w.sum(axis=1, keepdims=True)


class TreatmentSampler:
    """Draws one counterfactual treatment per training row."""

    def __init__(self, kind: SamplerKind, X=None, treatments=None, seed=0):
        self.kind = SamplerKind(kind)
        self.treatments = None if treatments is None else np.asarray(treatments, dtype=np.float64)
        self.propensity = None
        self.bin_probs = None
        if self.kind is SamplerKind.MARGINAL and self.treatments is None:
            raise ValueError("marginal sampling needs the observed treatments")
        if self.kind is SamplerKind.INVERSE_PROPENSITY:
            self.propensity = fit_propensity(X, treatments, seed=seed)
            self.bin_probs = inverse_propensity_bin_probs(self.propensity.predict_proba(X))

    def sample(self, n, rng):
        if self.kind is SamplerKind.UNIFORM:
            return rng.uniform(0.0, 1.0, size=n)
        if self.kind is SamplerKind.MARGINAL:
            return rng.choice(self.treatments, size=n, replace=True)
        return sample_from_bins(self.bin_probs, rng)


def sample_from_bins(bin_probs, rng):
    n, k = bin_probs.shape
    cdf = np.cumsum(bin_probs, axis=1)
    u = rng.uniform(size=(n, 1)) * cdf[:, -1:]
    bins = np.minimum((u > cdf).sum(axis=1), k - 1)
    return (bins + rng.uniform(size=n)) / k


def sample_tcf(sampler, X, treatments, rng):
    """One ``t_cf`` per row from a :class:`SamplerKind` (or a prepared sampler)."""
    if not isinstance(sampler, TreatmentSampler):
        sampler = TreatmentSampler(sampler, X, treatments)
    return sampler.sample(len(treatments), rng)


def route(t, t_cf, delta):
    """``Route.NEAR`` where ``|t_cf - t| < delta``, otherwise ``Route.FAR``."""
    near = np.abs(np.asarray(t_cf) - np.asarray(t)) < delta
    return np.where(near, Route.NEAR, Route.FAR)


def gi_pseudo_outcome(y, t, t_cf, dmu_dt):
    return y - (t - t_cf) * dmu_dt


# --------------------------------------------------------------------------
# losses on the model's standardized scale


def _standardize(model, y):
    return (np.asarray(y, dtype=np.float64) - model.y_mean) / model.y_std


def gi_targets(model, X, t, y, t_cf):
    """Standardized GI pseudo-targets; the derivative is evaluated without gradient."""
    dnet = model.net(X, t)[1]
    return gi_pseudo_outcome(_standardize(model, y), np.asarray(t), np.asarray(t_cf), dnet)


def squared_loss(pred: dn.Node, target, weights=None) -> dn.Node:
    """Mean squared error, or ``sum(w * err^2)`` when ``weights`` is given."""
    err = dn.square(dn.sub(pred, np.asarray(target, dtype=np.float64)))
    if weights is None:
        return dn.mean(err)
    return dn.sum_all(dn.mul(err, np.asarray(weights, dtype=np.float64)))


def gi_loss(model, X, t, y, t_cf, z: dn.Node | None = None) -> dn.Node:
    """Mean squared error between ``net(x, t_cf)`` and frozen GI pseudo-targets."""
    if len(t) == 0:
        return dn.const(0.0)
    target = gi_targets(model, X, t, y, t_cf)
    z = model.encode_node(X) if z is None else z
    return squared_loss(model.net_node(z, t_cf), target)


@dataclass
class KsTargets:
    """Frozen KS supervision for the surviving far members of a batch."""

    keep: np.ndarray          # positions (within the far set) that had neighbours
    mean: np.ndarray          # standardized posterior means
    variance: np.ndarray
    weights: np.ndarray
    neighbor_count: np.ndarray
    dropped: int = 0


def ks_targets(model, X, t_cf, train_X, train_t, train_y, config: GPConfig,
               train_embeds=None, gp: NeighborGP | None = None) -> KsTargets:
    """GP posteriors at ``(x_i, t_cf_i)`` over the full training set, no gradient."""
    if gp is None:
        if train_embeds is None:
            train_embeds = model.encode(train_X)
        gp = NeighborGP(train_embeds, train_t, _standardize(model, train_y), config)
    q = model.encode(X) if len(t_cf) else np.zeros((0, gp.embeds.shape[1]))
    means, variances, counts = gp.query(q, t_cf)
    keep = np.flatnonzero(counts > 0)
    w = ks_weights(variances[keep]) if keep.size else np.zeros(0)
    return KsTargets(keep, means[keep], variances[keep], w, counts[keep], int(len(t_cf) - keep.size))


def ks_weighted_loss(model, X, t_cf, targets: KsTargets, z: dn.Node | None = None) -> dn.Node:
    if targets.keep.size == 0:
        return dn.const(0.0)
    keep = targets.keep
    if z is None:
        z = model.encode_node(np.asarray(X)[keep])
    pred = model.net_node(z, np.asarray(t_cf)[keep])
    return squared_loss(pred, targets.mean, targets.weights)


def ks_loss(model, X, t_cf, train_X, train_t, train_y, config: GPConfig):
    """Variance-weighted KS loss; returns ``(loss_node, KsTargets)``."""
    targets = ks_targets(model, X, t_cf, train_X, train_t, train_y, config)
    if targets.dropped:
        logger.debug("ks_loss dropped %d members without neighbours", targets.dropped)
    return ks_weighted_loss(model, X, t_cf, targets), targets


# --------------------------------------------------------------------------
# augmented-pairs export


@dataclass
class AugmentRecord:
    """Pairs a training run imposed a loss on, for the HSIC diagnostic."""

    rows: list = field(default_factory=list)

    def add(self, index, source, t_value, pseudo_y, variance=None):
        for i, tv, py, *rest in zip(np.atleast_1d(index), np.atleast_1d(t_value), np.atleast_1d(pseudo_y),
                                    *([np.atleast_1d(variance)] if variance is not None else [])):
            self.rows.append((int(i), source, float(tv), float(py), float(rest[0]) if rest else None))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["instance_index", "t_source", "t_value", "pseudo_y", "variance"])
            for i, src, tv, py, var in self.rows:
                w.writerow([i, src, f"{tv:.17g}", f"{py:.17g}", "" if var is None else f"{var:.17g}"])


def read_augmented(path):
    """Load an augmented-pairs CSV into column arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "instance_index": np.array([int(r["instance_index"]) for r in rows], dtype=int),
        "t_source": np.array([r["t_source"] for r in rows]),
        "t_value": np.array([float(r["t_value"]) for r in rows]),
        "pseudo_y": np.array([float(r["pseudo_y"]) for r in rows]),
        "variance": np.array([float(r["variance"]) if r["variance"] else np.nan for r in rows]),
    }
