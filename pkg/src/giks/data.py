"""Synthetic observational benchmarks, splits and CSV/JSON storage.

Each generator returns a confounded :class:`Dataset` together with a
:class:`ResponseOracle` giving the noise-free response, so counterfactual
metrics can be computed. Real benchmark covariates are not shipped; the
covariates here are synthetic stand-ins and the treatment/response formulas
are applied on top of them.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DomainError, IntegrityError, ParseError, SpecError

logger = logging.getLogger(__name__)

KINDS = ("synthetic-simple", "ihdp", "news", "tcga")
DOSE_GRID = np.linspace(0.0, 1.0, 1001)


@dataclass
class Dataset:
    X: np.ndarray
    t: np.ndarray
    y: np.ndarray
    name: str = "dataset"
    seed: int = 0
    meta: dict | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        n = self.X.shape[0]
        if not (self.t.shape[0] == n and self.y.shape[0] == n):
            raise IntegrityError(f"rows disagree: X {n}, t {self.t.shape[0]}, y {self.y.shape[0]}")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.y))):
            raise IntegrityError("dataset contains non-finite values")
        if np.any(self.t < 0) or np.any(self.t > 1):
            raise DomainError("treatments must lie in [0, 1]")

    def __len__(self):
        return self.X.shape[0]

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    def subset(self, idx, name=None):
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.t[idx], self.y[idx], name or self.name, self.seed, self.meta)


@dataclass
class ResponseOracle:
    """Noise-free response ``mu(X, t)`` (vectorised over rows)."""

    mu_fn: Callable
    name: str = ""

    def mu(self, X, t):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (X.shape[0],))
        return np.asarray(self.mu_fn(X, t), dtype=np.float64)

    def curves(self, X, grid):
        """Matrix ``(n, len(grid))`` of responses on a treatment grid."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        n, g = X.shape[0], len(grid)
        Xr = np.repeat(X, g, axis=0)
        tr = np.tile(np.asarray(grid, dtype=np.float64), n)
        return self.mu(Xr, tr).reshape(n, g)

    def best_dose(self, X, grid=DOSE_GRID):
        """Grid argmax of ``mu`` per row (resolution 1/1000 by default)."""
        return np.asarray(grid)[np.argmax(self.curves(X, grid), axis=1)]


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = "synthetic-simple"
    n: int = 700
    d: int | None = None
    seed: int = 0
    dosage_bias: float = 2.0
    variant: int = 0
    n_test: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown generator kind {self.kind!r}; choose from {KINDS}")
        if self.n < 1 or self.n_test < 0:
            raise SpecError("n must be >= 1 and n_test >= 0")
        if self.kind == "tcga" and self.variant not in (0, 1, 2):
            raise SpecError(f"tcga variant must be 0, 1 or 2, got {self.variant}")
        if self.d is None:
            object.__setattr__(self, "d", _DEFAULT_D[self.kind])

    @property
    def total(self):
        return self.n + self.n_test

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)


_DEFAULT_D = {"synthetic-simple": 6, "ihdp": 25, "news": 50, "tcga": 20}


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _unit_directions(rng, k, d):
    v = rng.normal(size=(k, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# synthetic-simple


def simple_response(X, t):
    return np.sin(3 * np.pi * t) * (X[:, 0] + X[:, 2]) + (t - 0.5) ** 2 * X[:, 1] + X[:, 3]


def gen_synthetic_simple(spec: GeneratorSpec):
    """Six uniform covariates; treatment driven by ``(x1 + x2) / 2``."""
    if spec.d != 6:
        raise SpecError("synthetic-simple needs d = 6")
    rng = np.random.default_rng(spec.seed)
    n = spec.total
    X = rng.uniform(0.0, 1.0, size=(n, 6))
    t = np.clip((X[:, 0] + X[:, 1]) / 2 + rng.normal(0.0, 0.3, size=n), 0.0, 1.0)
    noise = rng.normal(0.0, 0.1, size=n)
    y = simple_response(X, t) + noise
    oracle = ResponseOracle(simple_response, "synthetic-simple")
    return Dataset(X, t, y, "synthetic-simple", spec.seed), oracle


# --------------------------------------------------------------------------
# IHDP-like (1-based covariate indices)

S_CON = (1, 2, 3, 5, 6)
S_DIS1 = (4, 7, 8, 9, 10, 11, 12, 13, 14, 15)
S_DIS2 = (16, 17, 18, 19, 20, 21, 22, 23, 24, 25)


def _cols(X, idx):
    return X[:, [i - 1 for i in idx]]


def ihdp_treatment_logit(X, c2, noise):
    x = lambda i: X[:, i - 1]
    trio = _cols(X, (3, 5, 6))
    inner = 5 * (_cols(X, S_DIS2) - c2).sum(axis=1) / len(S_DIS2) - 4 + noise
    return 2 * x(1) / (1 + x(2)) + 2 * trio.max(axis=1) / (0.2 + trio.min(axis=1)) + 2 * np.tanh(inner)


def ihdp_response(X, t, c1):
    x = lambda i: X[:, i - 1]
    a = np.sin(3 * np.pi * t) / (1.2 - t) * np.tanh(5 * (_cols(X, S_DIS1) - c1).sum(axis=1) / len(S_DIS1))
    b = np.exp(0.2 * (x(1) - x(6))) / (0.5 + 5 * _cols(X, (2, 3, 5)).min(axis=1))
    return a + b


def gen_ihdp_like(spec: GeneratorSpec):
    if spec.d != 25:
        raise SpecError("ihdp generator needs d = 25")
    rng = np.random.default_rng(spec.seed)
    n = spec.total
    X = rng.binomial(1, 0.5, size=(n, 25)).astype(np.float64)
    con = [i - 1 for i in S_CON]
    X[:, con] = rng.uniform(0.0, 1.0, size=(n, len(con)))
    c1 = float(_cols(X, S_DIS1).mean(axis=1).mean())
    c2 = float(_cols(X, S_DIS2).mean(axis=1).mean())
    t = _sigmoid(ihdp_treatment_logit(X, c2, rng.normal(0.0, 0.25, size=n)))
    t = np.clip(t, 0.0, 1.0)
    y = ihdp_response(X, t, c1) + rng.normal(0.0, 0.25, size=n)
    oracle = ResponseOracle(lambda X_, t_: ihdp_response(X_, t_, c1), "ihdp")
    oracle.params = {"c1": c1, "c2": c2}
    return Dataset(X, t, y, "ihdp", spec.seed), oracle


# --------------------------------------------------------------------------
# NEWS-like


def news_base(X, v):
    """Clamped covariate term ``max(-2, min(2, y')) + 20 v1.x``."""
    ratio = (X @ v[1]) / (X @ v[2])
    y_prime = np.exp(np.minimum(ratio - 0.3, 50.0))
    return np.clip(y_prime, -2.0, 2.0) + 20 * (X @ v[0])


def news_response(X, t, v, noise=0.0):
    return 2 * news_base(X, v) * (4 * (t - 0.5) ** 2 + np.sin(np.pi / 2 * t) + noise)


def news_beta_b(X, v):
    return np.abs((X @ v[2]) / (2 * (X @ v[1])))


def _sparse_counts(rng, n, d):
    mask = rng.uniform(size=(n, d)) >= 0.8
    X = np.where(mask, rng.poisson(2.0, size=(n, d)) + 1.0, 0.0)
    return X


def gen_news_like(spec: GeneratorSpec):
    if spec.d < 10:
        raise SpecError("news generator needs d >= 10")
    rng = np.random.default_rng(spec.seed)
    v = _unit_directions(rng, 3, spec.d)
    n = spec.total
    X = _sparse_counts(rng, n, spec.d)
    resampled = 0
    while True:
        bad = (np.abs(X @ v[1]) < 1e-12) | (np.abs(X @ v[2]) < 1e-12)
        if not bad.any():
            break
        resampled += int(bad.sum())
        X[bad] = _sparse_counts(rng, int(bad.sum()), spec.d)
    if resampled:
        logger.info("news generator resampled %d degenerate rows", resampled)
    X = X / np.linalg.norm(X, axis=1, keepdims=True)
    t = rng.beta(2.0, news_beta_b(X, v))
    noise = rng.normal(0.0, 0.5, size=n)
    y = news_response(X, t, v, noise)
    oracle = ResponseOracle(lambda X_, t_: news_response(X_, t_, v), "news")
    oracle.params = {"v": v}
    return Dataset(X, t, y, "news", spec.seed), oracle


# --------------------------------------------------------------------------
# TCGA(0-2)


def tcga_ratio(X, v):
    return (X @ v[1]) / (X @ v[2])


def tcga_optimal_dosage(X, v, variant):
    r = tcga_ratio(X, v)
    if variant == 0:
        return r / 2
    if variant == 1:
        return 1.0 / (2 * r)
    return np.where(r >= 1, 0.25 * r, 1.0)


def tcga_response(X, d, v, variant):
    a = X @ v[0]
    if variant == 0:
        return 10 * (a + 12 * d * (X @ v[1]) - 12 * d ** 2 * (X @ v[2]))
    r = tcga_ratio(X, v)
    if variant == 1:
        return 10 * (a + np.sin(np.pi * r * d))
    return 10 * (a + 12 * d * (d - 0.75 * r) ** 2)


def tcga_beta_b(dstar, bias):
    b = (bias - 1) / dstar + 2 - bias
    # only reachable for bias > 2 with d* > 1; fall back to d* = 1
    return np.where(b > 0, b, 1.0)


def _lognormal_rows(rng, n, d):
    X = np.exp(rng.normal(size=(n, d)))
    return X / X.std(axis=1, keepdims=True)


def gen_tcga(spec: GeneratorSpec, variant: int | None = None):
    variant = spec.variant if variant is None else variant
    if variant not in (0, 1, 2):
        raise SpecError(f"tcga variant must be 0, 1 or 2, got {variant}")
    if spec.d < 10:
        raise SpecError("tcga generator needs d >= 10")
    if not spec.dosage_bias > 1:
        raise SpecError("dosage_bias must exceed 1")
    rng = np.random.default_rng(spec.seed)
    v = np.abs(_unit_directions(rng, 3, spec.d))
    n = spec.total
    X = _lognormal_rows(rng, n, spec.d)
    while True:
        bad = np.abs(X @ v[2]) < 1e-12
        if not bad.any():
            break
        X[bad] = _lognormal_rows(rng, int(bad.sum()), spec.d)
    dstar = tcga_optimal_dosage(X, v, variant)
    d = rng.beta(spec.dosage_bias, tcga_beta_b(dstar, spec.dosage_bias))
    y = tcga_response(X, d, v, variant) + rng.normal(0.0, 0.2, size=n)
    oracle = ResponseOracle(lambda X_, t_: tcga_response(X_, t_, v, variant), f"tcga{variant}")
    oracle.params = {"v": v, "variant": variant}
    oracle.optimal_dosage = lambda X_: np.clip(tcga_optimal_dosage(np.atleast_2d(X_), v, variant), 0.0, 1.0)
    return Dataset(X, d, y, f"tcga{variant}", spec.seed), oracle


_GENERATORS = {
    "synthetic-simple": gen_synthetic_simple,
    "ihdp": gen_ihdp_like,
    "news": gen_news_like,
    "tcga": gen_tcga,
}


def generate(spec: GeneratorSpec):
    """Run the generator for ``spec``; returns ``(data, test, oracle)``.

    ``data`` holds the first ``spec.n`` rows and ``test`` the remaining
    ``spec.n_test`` rows (``None`` when ``n_test == 0``).
    """
    full, oracle = _GENERATORS[spec.kind](spec)
    meta = {"name": full.name, "seed": spec.seed, "generator": spec.to_dict()}
    data = full.subset(np.arange(spec.n))
    data.meta = dict(meta, n=spec.n, d=full.d, part="data")
    test = None
    if spec.n_test:
        test = full.subset(np.arange(spec.n, spec.total))
        test.meta = dict(meta, n=spec.n_test, d=full.d, part="test")
    return data, test, oracle


def oracle_from_meta(meta):
    """Rebuild the response oracle recorded in dataset metadata, or ``None``."""
    if not meta or "generator" not in meta:
        return None
    return generate(GeneratorSpec.from_dict(meta["generator"]))[2]


def split(dataset: Dataset, val_fraction=0.3, seed=0):
    """Seeded shuffle into ``(train, val)``; val gets ``round(n * fraction)`` rows."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    n = len(dataset)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        raise ValueError(f"val_fraction {val_fraction} leaves an empty side for n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return dataset.subset(train_idx), dataset.subset(val_idx)


def split_indices(n, val_fraction=0.3, seed=0):
    n_val = int(round(n * val_fraction))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def standardize_outcomes(y):
    mean = float(np.mean(y))
    std = float(np.std(y))
    return mean, (std if std > 1e-12 else 1.0)


# --------------------------------------------------------------------------
# storage


def default_meta_path(path):
    """``data.csv`` pairs with ``meta.json``; any other ``foo.csv`` with ``foo.json``."""
    path = Path(path)
    return path.parent / "meta.json" if path.stem == "data" else path.with_suffix(".json")


def save(dataset: Dataset, path, meta_path=None):
    """Write ``x_0..x_{d-1},t,y`` at 17 significant digits plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = dataset.d
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x_{j}" for j in range(d)] + ["t", "y"])
    for row, t, y in zip(dataset.X, dataset.t, dataset.y):
        w.writerow([f"{v:.17g}" for v in row] + [f"{t:.17g}", f"{y:.17g}"])
    path.write_text(buf.getvalue())
    meta = dict(dataset.meta or {})
    meta.update(name=dataset.name, seed=dataset.seed, n=dataset.n, d=d)
    meta_path = Path(meta_path) if meta_path else default_meta_path(path)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path, meta_path


def load(path, meta_path=None):
    """Read a dataset CSV; metadata is optional (without it there is no oracle)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ParseError("empty file", line=1)
    header = rows[0]
    d = len(header) - 2
    expected = [f"x_{j}" for j in range(d)] + ["t", "y"]
    if d < 1 or header != expected:
        raise ParseError(f"bad header {header!r}", line=1)
    values = np.empty((len(rows) - 1, d + 2))
    for i, row in enumerate(rows[1:]):
        if len(row) != d + 2:
            raise ParseError(f"expected {d + 2} fields, got {len(row)}", line=i + 2)
        try:
            values[i] = [float(v) for v in row]
        except ValueError as exc:
            raise ParseError(str(exc), line=i + 2) from exc
    meta_path = Path(meta_path) if meta_path else default_meta_path(path)
    meta = None
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("n") != values.shape[0] or meta.get("d") != d:
            raise IntegrityError(
                f"metadata says n={meta.get('n')}, d={meta.get('d')}; CSV has n={values.shape[0]}, d={d}")
    name = meta.get("name", path.stem) if meta else path.stem
    seed = meta.get("seed", 0) if meta else 0
    return Dataset(values[:, :d], values[:, d], values[:, d + 1], name, seed, meta)
