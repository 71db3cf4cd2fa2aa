"""Training loop: factual pretraining, GI/GP parameter fixing, combined objective."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffnet as dn
from .augment import (AugmentRecord, SamplerKind, TreatmentSampler, gi_targets, ks_weights,
                      squared_loss)
from .data import Dataset, standardize_outcomes
from .errors import ConfigError, TrainingError
from .gp import GPConfig, KernelKind, NeighborGP
from .model import ModelState

logger = logging.getLogger(__name__)

# learning rate, lambda_gi, lambda_ks per benchmark family
BENCHMARK_HYPERPARAMS = {
    "tcga": (1e-4, 1e-1, 1e-2),
    "ihdp": (1e-2, 1e-4, 1e-1),
    "news": (1e-3, 1e-2, 1e-4),
}
# no reference values for this family; picked on tuning seeds 10-14, disjoint from seeds 0-4
SYNTHETIC_HYPERPARAMS = (1e-3, 0.1, 0.01)


@dataclass(frozen=True)
class GiksConfig:
    learning_rate: float = 1e-3
    lambda_gi: float = 1.0
    lambda_ks: float = 1.0
    batch_size: int = 128
    pretrain_epochs: int = 100
    epochs: int = 400
    epoch_gi_start: int = 0
    epoch_gp_start: int = 0
    sampler: str = "uniform"
    delta_grid: tuple = (0.025, 0.05, 0.075, 0.1)
    sigma2_grid: tuple = (0.1, 0.5, 1.0)
    eps_gp_grid: tuple = (0.05, 0.1, 0.2)
    patience: int = 30
    seed: int = 0
    weight_decay: float = 0.01
    kernel: str = "cosine"
    max_neighbors: int = 200
    hidden_dims: tuple = (50, 50)
    embed_dim: int = 50
    head_hidden: tuple = (50,)

    def __post_init__(self):
        for name in ("delta_grid", "sigma2_grid", "eps_gp_grid", "hidden_dims", "head_hidden"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not (self.delta_grid and self.sigma2_grid and self.eps_gp_grid):
            raise ConfigError("parameter grids must be non-empty")
        if self.lambda_gi < 0 or self.lambda_ks < 0:
            raise ConfigError("loss weights must be non-negative")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.pretrain_epochs < 0 or self.epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        try:
            SamplerKind(self.sampler)
            KernelKind(self.kernel)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def for_dataset(cls, name, **overrides):
        """Defaults with the per-benchmark learning rate and loss weights."""
        key = next((k for k in BENCHMARK_HYPERPARAMS if name.startswith(k)), None)
        lr, lgi, lks = BENCHMARK_HYPERPARAMS[key] if key else SYNTHETIC_HYPERPARAMS
        return cls(**{"learning_rate": lr, "lambda_gi": lgi, "lambda_ks": lks, **overrides})

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @property
    def label(self):
        if self.lambda_gi == 0 and self.lambda_ks == 0:
            return "factual"
        if self.lambda_ks == 0:
            return "gi"
        if self.lambda_gi == 0:
            return "ks"
        return "giks"

    def optimizer(self):
        return dn.OptimizerConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay)

    def gp_config(self, sigma2, eps_gp):
        return GPConfig(KernelKind(self.kernel), sigma2, eps_gp, self.max_neighbors)


@dataclass
class TrainReport:
    label: str
    pretrain_losses: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)
    delta: float = float("nan")
    sigma2: float = float("nan")
    eps_gp: float = float("nan")
    ks_scores: dict = field(default_factory=dict)
    delta_scores: dict = field(default_factory=dict)
    best_epoch: int = 0
    best_val_rmse: float = float("inf")
    ks_dropped: int = 0
    empty_aug_epochs: int = 0
    stopped_early: bool = False
    wall_seconds: float = 0.0

    def to_dict(self):
        d = asdict(self)
        d["ks_scores"] = {str(k): _finite_or_none(v) for k, v in self.ks_scores.items()}
        d["delta_scores"] = {str(k): _finite_or_none(v) for k, v in self.delta_scores.items()}
        return d


def _finite_or_none(v):
    return float(v) if math.isfinite(v) else None


def build_model(d, config: GiksConfig, seed=None):
    return ModelState.create(d, config.hidden_dims, config.embed_dim, config.head_hidden,
                             seed=config.seed if seed is None else seed)


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[s:s + batch_size] for s in range(0, n, batch_size)]


def _check_finite(value, what, **diag):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite {what}", diagnostics={k: float(v) for k, v in diag.items()})


def rmse(model, data: Dataset):
    return float(np.sqrt(np.mean((model.predict(data.X, data.t) - data.y) ** 2)))


def pretrain_factual(model, train: Dataset, config: GiksConfig, rng=None, optimizer=None):
    """Factual MSE training for ``config.pretrain_epochs``; returns per-epoch mean losses."""
    if len(train) == 0:
        raise ConfigError("training set is empty")
    rng = rng or np.random.default_rng(config.seed)
    opt = optimizer or dn.AdamW(model.params(), config.optimizer())
    ys = (train.y - model.y_mean) / model.y_std
    losses = []
    for epoch in range(config.pretrain_epochs):
        total = 0.0
        for idx in _batches(len(train), config.batch_size, rng):
            opt.zero_grad()
            loss = squared_loss(model.net_node(model.encode_node(train.X[idx]), train.t[idx]), ys[idx])
            _check_finite(float(loss.value), "factual loss", epoch=epoch)
            dn.backward(loss)
            opt.step()
            total += float(loss.value) * len(idx)
        losses.append(total / len(train))
    return losses


def _pick(scores, tol=1e-12):
    """Smallest-score key; keys are visited in ascending order so ties keep the smaller one."""
    best_key, best = None, math.inf
    for key in sorted(scores):
        s = scores[key]
        if s < best - tol * max(1.0, abs(best) if math.isfinite(best) else 1.0):
            best_key, best = key, s
    return best_key


def ks_validation_scores(model, train: Dataset, val: Dataset, config: GiksConfig):
    """Variance-weighted validation loss of GP posteriors at the observed treatments."""
    train_emb = model.encode(train.X)
    val_emb = model.encode(val.X)
    ys_train = (train.y - model.y_mean) / model.y_std
    ys_val = (val.y - model.y_mean) / model.y_std
    scores = {}
    for sigma2 in sorted(config.sigma2_grid):
        for eps in sorted(config.eps_gp_grid):
            gp = NeighborGP(train_emb, train.t, ys_train, config.gp_config(sigma2, eps))
            means, var, counts = gp.query(val_emb, val.t)
            ok = counts > 0
            if not ok.any():
                scores[(sigma2, eps)] = math.inf
                continue
            w = np.exp(-var[ok])
            scores[(sigma2, eps)] = float(np.sum(w * (ys_val[ok] - means[ok]) ** 2) / np.sum(w))
    return scores


def delta_validation_scores(model, train: Dataset, val: Dataset, config: GiksConfig):
    """Taylor transfer from the nearest-embedding training row within ``delta``."""
    train_emb = model.encode(train.X)
    val_emb = model.encode(val.X)
    slope = model.predict_dt(train.X, train.t)
    dist2 = ((val_emb[:, None, :] - train_emb[None, :, :]) ** 2).sum(axis=2)
    gap = np.abs(train.t[None, :] - val.t[:, None])
    scores = {}
    for delta in sorted(config.delta_grid):
        masked = np.where(gap <= delta, dist2, np.inf)
        j = np.argmin(masked, axis=1)
        ok = np.isfinite(masked[np.arange(len(val)), j])
        if not ok.any():
            scores[delta] = math.inf
            continue
        jj = j[ok]
        pred = train.y[jj] - (train.t[jj] - val.t[ok]) * slope[jj]
        scores[delta] = float(np.mean((pred - val.y[ok]) ** 2))
    return scores


def fix_gigp_params(model, train: Dataset, val: Dataset, config: GiksConfig, return_scores=False):
    """Choose ``(delta, sigma2, eps_gp)`` on validation data without training."""
    if len(val) == 0:
        raise ConfigError("validation set is empty")
    ks_scores = ks_validation_scores(model, train, val, config)
    pair = _pick(ks_scores)
    delta_scores = delta_validation_scores(model, train, val, config)
    delta = _pick(delta_scores)
    if pair is None or delta is None:
        raise ConfigError("no validation sample has neighbours for any grid cell")
    out = (delta, pair[0], pair[1])
    return (out, ks_scores, delta_scores) if return_scores else out


def _record_epoch(report, **row):
    report.epochs.append({k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})


def train_giks(train: Dataset, val: Dataset, config: GiksConfig, model=None, callback=None):
    """Full training; returns ``(model, report, augment_record)``.

    The model is restored to the epoch with the lowest validation factual RMSE.
    ``augment_record`` holds the counterfactual pairs used in that epoch
    (empty for factual-only runs).
    """
    start = time.perf_counter()
    streams = np.random.SeedSequence(config.seed).spawn(3)
    batch_rng = np.random.default_rng(streams[0])
    tcf_rng = np.random.default_rng(streams[1])
    if model is None:
        model = build_model(train.d, config)
        model.y_mean, model.y_std = standardize_outcomes(train.y)
    report = TrainReport(config.label)
    opt = dn.AdamW(model.params(), config.optimizer())

    report.pretrain_losses = pretrain_factual(model, train, config, batch_rng, opt)

    (delta, sigma2, eps_gp), ks_scores, delta_scores = fix_gigp_params(model, train, val, config, True)
    report.delta, report.sigma2, report.eps_gp = delta, sigma2, eps_gp
    report.ks_scores, report.delta_scores = ks_scores, delta_scores
    gp_cfg = config.gp_config(sigma2, eps_gp)
    sampler = None
    if config.lambda_gi > 0 or config.lambda_ks > 0:
        sampler = TreatmentSampler(config.sampler, train.X, train.t, seed=config.seed)

    ys = (train.y - model.y_mean) / model.y_std
    n = len(train)
    best = (math.inf, 0, model.snapshot(), AugmentRecord())
    since_best = 0
    for epoch in range(1, config.epochs + 1):
        use_gi = config.lambda_gi > 0 and epoch >= config.epoch_gi_start
        use_ks = config.lambda_ks > 0 and epoch >= config.epoch_gp_start
        t_cf = sampler.sample(n, tcf_rng) if sampler is not None else None
        record = AugmentRecord()
        sums = dict(factual=0.0, gi=0.0, ks=0.0, total=0.0)
        n_near = n_far = dropped = 0
        for idx in _batches(n, config.batch_size, batch_rng):
            opt.zero_grad()
            Xb, tb = train.X[idx], train.t[idx]
            z = model.encode_node(Xb)
            l_fact = squared_loss(model.net_node(z, tb), ys[idx])
            total = l_fact
            l_gi = l_ks = 0.0
            if use_gi or use_ks:
                tcb = t_cf[idx]
                near = np.abs(tcb - tb) < delta
                if use_gi and near.any():
                    ni = idx[near]
                    target = gi_targets(model, train.X[ni], train.t[ni], train.y[ni], tcb[near])
                    node = squared_loss(model.net_node(model.encode_node(train.X[ni]), tcb[near]), target)
                    total = dn.add(total, dn.mul(node, config.lambda_gi))
                    l_gi = float(node.value)
                    n_near += int(near.sum())
                    record.add(ni, "gi", tcb[near], model.y_mean + model.y_std * target)
                far = ~near
                if use_ks and far.any():
                    fi = idx[far]
                    emb = model.encode(train.X)
                    gp = NeighborGP(emb, train.t, ys, gp_cfg)
                    means, var, counts = gp.query(emb[fi], tcb[far])
                    keep = counts > 0
                    dropped += int((~keep).sum())
                    if keep.any():
                        ki = fi[keep]
                        w = ks_weights(var[keep])
                        node = squared_loss(model.net_node(model.encode_node(train.X[ki]), tcb[far][keep]),
                                            means[keep], w)
                        total = dn.add(total, dn.mul(node, config.lambda_ks))
                        l_ks = float(node.value)
                        n_far += int(keep.sum())
                        record.add(ki, "ks", tcb[far][keep], model.y_mean + model.y_std * means[keep],
                                   var[keep])
            value = float(total.value)
            _check_finite(value, "training loss", epoch=epoch, factual=float(l_fact.value), gi=l_gi, ks=l_ks)
            dn.backward(total)
            opt.step()
            w_b = len(idx) / n
            sums["factual"] += float(l_fact.value) * w_b
            sums["gi"] += l_gi * w_b
            sums["ks"] += l_ks * w_b
            sums["total"] += value * w_b
        if (use_gi or use_ks) and n_near == 0 and n_far == 0:
            report.empty_aug_epochs += 1
            logger.warning("epoch %d: no counterfactual members survived; factual loss only", epoch)
        report.ks_dropped += dropped
        val_rmse = rmse(model, val)
        report.val_rmse.append(val_rmse)
        _record_epoch(report, epoch=epoch, n_near=n_near, n_far=n_far, ks_dropped=dropped, **sums)
        if callback is not None:
            callback(epoch, model, report)
        if val_rmse < best[0]:
            best = (val_rmse, epoch, model.snapshot(), record)
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                report.stopped_early = True
                break
    if config.epochs > 0:
        model.restore(best[2])
        report.best_epoch, report.best_val_rmse = best[1], best[0]
    else:
        report.best_val_rmse = rmse(model, val)
    report.wall_seconds = time.perf_counter() - start
    return model, report, best[3]
