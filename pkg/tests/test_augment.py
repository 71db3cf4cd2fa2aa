import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from giks import diffnet as dn
from giks.augment import (AugmentRecord, KsTargets, Route, SamplerKind, TreatmentSampler, fit_propensity,
                          gi_loss, gi_pseudo_outcome, gi_targets, inverse_propensity_bin_probs,
                          ks_loss, ks_weighted_loss, read_augmented, route, sample_from_bins,
                          sample_tcf, treatment_bins)
from giks.gp import GPConfig

from conftest import central_diff, exact_model, rel_err


def test_uniform_sampler_moments():
    t = sample_tcf(SamplerKind.UNIFORM, None, np.zeros(100_000), np.random.default_rng(0))
    assert t.min() >= 0 and t.max() <= 1
    assert abs(t.mean() - 0.5) <= 0.01


def test_uniform_sampler_independent_of_covariates():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(100_000, 3))
    t = sample_tcf("uniform", X, np.zeros(100_000), rng)
    assert abs(np.corrcoef(X.sum(axis=1), t)[0, 1]) <= 0.02


def test_marginal_sampler_draws_observed_values():
    obs = np.array([0.1, 0.25, 0.7])
    t = sample_tcf(SamplerKind.MARGINAL, None, obs, np.random.default_rng(2))
    assert set(t) <= set(obs)
    t = TreatmentSampler("marginal", treatments=obs).sample(1000, np.random.default_rng(3))
    assert set(t) <= set(obs) and len(set(t)) == 3


def test_inverse_propensity_confident_classifier():
    proba = np.zeros((1, 10))
    proba[0, 4] = 1.0
    probs = inverse_propensity_bin_probs(proba)
    assert probs[0, 4] == pytest.approx(1 / (1 + 9 * 100))
    assert probs.sum() == pytest.approx(1.0)


def test_sample_from_bins_frequencies():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    rng = np.random.default_rng(5)
    t = sample_from_bins(np.tile(p, (50_000, 1)), rng)
    counts = np.bincount(np.minimum((t * 4).astype(int), 3), minlength=4) / t.size
    np.testing.assert_allclose(counts, p, atol=0.01)


def test_propensity_single_bin():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 3))
    t = rng.uniform(0.3, 0.399, size=40)
    model = fit_propensity(X, t, epochs=30)
    proba = model.predict_proba(rng.normal(size=(10, 3)))
    assert np.all(np.argmax(proba, axis=1) == 3)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)


def test_propensity_separable_bins():
    rng = np.random.default_rng(1)
    bins = np.repeat(np.arange(10), 30)
    X = np.eye(10)[bins] * 3 + rng.normal(scale=0.1, size=(300, 10))
    t = (bins + rng.uniform(size=300)) / 10
    model = fit_propensity(X, t)
    assert model.accuracy(X, t) >= 0.95


def test_inverse_propensity_sampler_runs():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(50, 2))
    t = rng.uniform(size=50)
    s = TreatmentSampler(SamplerKind.INVERSE_PROPENSITY, X, t, seed=0)
    out = s.sample(50, rng)
    assert out.shape == (50,) and out.min() >= 0 and out.max() <= 1


def test_gi_pseudo_outcome_examples():
    assert gi_pseudo_outcome(0.7, 0.4, 0.4, 123.0) == 0.7
    assert gi_pseudo_outcome(1.0, 0.5, 0.6, 2.0) == pytest.approx(1.2)


def test_gi_linear_response_example():
    m = exact_model([0.0], {1: 3.0})  # mu = 3t
    target = gi_targets(m, np.zeros((1, 1)), np.array([0.5]), np.array([1.5]), np.array([0.55]))
    assert target[0] == pytest.approx(1.65, abs=1e-15)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=30), st.floats(0.01, 0.5))
def test_routing_partition(pairs, delta):
    t, t_cf = np.array(pairs).T
    r = route(t, t_cf, delta)
    near = r == Route.NEAR
    assert np.array_equal(near, np.abs(t_cf - t) < delta)
    assert np.all((r == Route.NEAR) ^ (r == Route.FAR))


def test_gi_loss_single_instance_and_gradient(small_model):
    rng = np.random.default_rng(0)
    X, t, y = rng.normal(size=(1, 4)), np.array([0.4]), np.array([0.9])
    t_cf = np.array([0.45])
    target = gi_targets(small_model, X, t, y, t_cf)
    pred = small_model.net(X, t_cf)[0]
    assert float(gi_loss(small_model, X, t, y, t_cf).value) == pytest.approx((pred[0] - target[0]) ** 2)

    X, t, y = rng.normal(size=(5, 4)), rng.uniform(size=5), rng.normal(size=5)
    t_cf = np.clip(t + rng.uniform(-0.05, 0.05, size=5), 0, 1)
    frozen = gi_targets(small_model, X, t, y, t_cf)

    def frozen_loss():
        return float(np.mean((small_model.net(X, t_cf)[0] - frozen) ** 2))
    dn.zero_grads(small_model.params())
    dn.backward(gi_loss(small_model, X, t, y, t_cf))
    for p in small_model.params():
        assert rel_err(p.grad, central_diff(frozen_loss, p)) <= 1e-4, p.name


def test_gi_loss_empty():
    assert float(gi_loss(None, np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros(0)).value) == 0.0


def test_ks_weighted_loss_example(small_model):
    X = np.random.default_rng(1).normal(size=(2, 4))
    t_cf = np.array([0.2, 0.8])
    pred = small_model.net(X, t_cf)[0]
    targets = KsTargets(np.array([0, 1]), pred - 1.0, np.array([0.0, math.log(3)]),
                        np.array([0.75, 0.25]), np.array([3, 3]))
    assert float(ks_weighted_loss(small_model, X, t_cf, targets).value) == pytest.approx(1.0)
    targets.mean = pred
    assert float(ks_weighted_loss(small_model, X, t_cf, targets).value) == pytest.approx(0.0, abs=1e-24)


def test_ks_loss_frozen_targets(small_model):
    rng = np.random.default_rng(2)
    train_X, train_t, train_y = rng.normal(size=(40, 4)), rng.uniform(size=40), rng.normal(size=40)
    X, t_cf = train_X[:6], rng.uniform(size=6)
    cfg = GPConfig(sigma2=0.5, eps_gp=0.2)
    node, targets = ks_loss(small_model, X, t_cf, train_X, train_t, train_y, cfg)
    keep = targets.keep
    assert np.isclose(targets.weights.sum(), 1.0)

    def frozen_loss():
        pred = small_model.net(X[keep], t_cf[keep])[0]
        return float(np.sum(targets.weights * (pred - targets.mean) ** 2))
    dn.zero_grads(small_model.params())
    dn.backward(node)
    for p in small_model.params():
        assert rel_err(p.grad, central_diff(frozen_loss, p)) <= 1e-4, p.name

    # changing neighbour outcomes moves the loss value but not through the gradient path
    node2, _ = ks_loss(small_model, X, t_cf, train_X, train_t, train_y + 1.0, cfg)
    assert float(node2.value) != float(node.value)


def test_ks_loss_drops_members_without_neighbours(small_model):
    rng = np.random.default_rng(3)
    train_X, train_y = rng.normal(size=(10, 4)), rng.normal(size=10)
    train_t = np.full(10, 0.9)
    node, targets = ks_loss(small_model, train_X[:3], np.array([0.1, 0.1, 0.1]), train_X, train_t, train_y,
                            GPConfig(eps_gp=0.05))
    assert targets.dropped == 3 and float(node.value) == 0.0


def test_treatment_bins_edges():
    np.testing.assert_array_equal(treatment_bins([0.0, 0.099, 0.1, 0.999, 1.0]), [0, 0, 1, 9, 9])


def test_augment_record_roundtrip(tmp_path):
    rec = AugmentRecord()
    rec.add([0, 1], "observed", [0.1, 0.2], [1.0, 2.0])
    rec.add([1], "gi", [0.25], [2.1])
    rec.add([0], "ks", [0.8], [0.3], [0.05])
    path = tmp_path / "augmented.csv"
    rec.write_csv(path)
    assert path.read_text().splitlines()[0] == "instance_index,t_source,t_value,pseudo_y,variance"
    back = read_augmented(path)
    np.testing.assert_array_equal(back["instance_index"], [0, 1, 1, 0])
    np.testing.assert_array_equal(back["t_source"], ["observed", "observed", "gi", "ks"])
    np.testing.assert_array_equal(back["t_value"], [0.1, 0.2, 0.25, 0.8])
    assert np.isnan(back["variance"][:3]).all() and back["variance"][3] == 0.05
