import numpy as np
import pytest

from giks.data import GeneratorSpec, generate, split
from giks.model import ModelState


def central_diff(fn, block, h=1e-5):
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``block.value``."""
    grad = np.zeros_like(block.value)
    it = np.nditer(block.value, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = block.value[i]
        block.value[i] = old + h
        up = fn()
        block.value[i] = old - h
        down = fn()
        block.value[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


@pytest.fixture
def small_model():
    return ModelState.create(4, hidden_dims=(6,), embed_dim=5, head_hidden=(4,), seed=3)


@pytest.fixture(scope="session")
def simple_data():
    data, test, oracle = generate(GeneratorSpec("synthetic-simple", n=300, seed=0, n_test=100))
    train, val = split(data, 0.3, seed=0)
    return train, val, test, oracle


def exact_model(weights, t_coefs):
    """Identity encoder plus one linear VC layer: eta = w . x + sum_k c_k * B_k(t).

    For non-negative ``x`` this realises the response exactly, so its
    analytic t-derivative is the true one.
    """
    d = len(weights)
    m = ModelState.create(d, hidden_dims=(), embed_dim=d, head_hidden=(), seed=0)
    W, b = m.encoder.layers[0]
    W.value[...] = np.eye(d)
    b.value[...] = 0.0
    bank = m.head.banks[0]
    bank.value[...] = 0.0
    dim = m.basis.dim
    for j, w in enumerate(weights):
        bank.value[j * dim, 0] = w
    for k, c in t_coefs.items():
        bank.value[d * dim + k, 0] = c
    return m


def beta_pit_ks(t, a, b, seed=0):
    """KS distance from uniform of the randomized PIT ``u_i = F_i(t_i)`` under per-row Beta(a, b_i).

    Float rounding piles near-1 draws onto exactly 1.0; the randomized
    transform spreads each such atom over ``[F_i(t_i^-), F_i(t_i)]``.
    """
    from scipy import stats

    hi = stats.beta.cdf(t, a, b)
    lo = stats.beta.cdf(np.nextafter(t, -np.inf), a, b)
    u = lo + np.random.default_rng(seed).uniform(size=len(t)) * (hi - lo)
    return stats.kstest(u, "uniform").statistic


GENERATOR_CASES = [("synthetic-simple", 0), ("ihdp", 0), ("news", 0), ("tcga", 0), ("tcga", 1), ("tcga", 2)]


def generator_invariants(kind, variant, seed, n=2000):
    """Check one generated dataset; returns a list of failure strings (empty when all pass)."""
    from giks.data import news_base, news_beta_b, tcga_beta_b, tcga_optimal_dosage

    spec = GeneratorSpec(kind, n=n, seed=seed, variant=variant)
    data, _, oracle = generate(spec)
    fails = []
    if not (np.all(np.isfinite(data.X)) and np.all(np.isfinite(data.y))):
        fails.append("non-finite values")
    if not (data.t.min() >= 0 and data.t.max() <= 1):
        fails.append("treatment outside [0, 1]")
    resid = data.y - oracle.mu(data.X, data.t)
    if kind == "news":
        resid = resid / (2 * news_base(data.X, oracle.params["v"]))
    noise = {"synthetic-simple": 0.1, "ihdp": 0.25, "news": 0.5, "tcga": 0.2}[kind]
    if abs(resid.mean()) > 3 * noise / np.sqrt(n):
        fails.append(f"residual mean {resid.mean():.4g}")
    if abs(resid.std() - noise) > 0.1 * noise:
        fails.append(f"residual std {resid.std():.4g} vs {noise}")
    if kind in ("news", "tcga"):
        if kind == "news":
            a, b = 2.0, news_beta_b(data.X, oracle.params["v"])
        else:
            v = oracle.params["v"]
            a, b = spec.dosage_bias, tcga_beta_b(tcga_optimal_dosage(data.X, v, variant), spec.dosage_bias)
        stat = beta_pit_ks(data.t, a, b, seed)
        if stat > 1.95 / np.sqrt(n):
            fails.append(f"Beta KS statistic {stat:.4g}")
    if kind == "tcga":
        rows = data.X[:100]
        closed = oracle.optimal_dosage(rows)
        grid = oracle.best_dose(rows)
        # multiple optima (variant 1 with several sine peaks, variant 2 at r = 1) tie in value
        gap = np.abs(closed - grid) > 1e-3 + 1e-12
        value_gap = oracle.mu(rows, closed) - oracle.mu(rows, grid)
        if np.any(gap & (np.abs(value_gap) > 1e-6 * (1 + np.abs(oracle.mu(rows, grid))))):
            fails.append(f"closed-form d* disagrees with grid search on {int(gap.sum())} rows")
    return fails
