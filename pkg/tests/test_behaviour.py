import numpy as np
import pytest

from bpolab.approx import CategoricalPolicy, GaussianPolicy, OptimizerState
from bpolab.behaviour import (BehaviourConfig, continuous_mu_grads, cross_entropy_grads, discrete_mu_step,
                              grid_loss, target_from_tables)
from bpolab.fixtures import AnalyticQHat, gaussian_fixture, tabular_fixture
from bpolab.mdp import short_corridor_mdp
from bpolab.oracle import compute_q_hat, optimal_behaviour_policy


def test_target_hand_example_and_cancellation():
    t = target_from_tables(np.array([[0.5, 0.5], [0.3, 0.7]]), np.array([[1.0, 4.0], [2.0, 2.0]]))
    np.testing.assert_allclose(t.probs, [[1 / 3, 2 / 3], [0.3, 0.7]], atol=1e-15)
    assert not t.fallback.any()


def test_target_fallback_when_normalizer_vanishes():
    t = target_from_tables(np.array([[0.5, 0.5]]), np.zeros((1, 2)))
    assert t.fallback[0]
    np.testing.assert_array_equal(t.probs, [[0.5, 0.5]])


def test_target_matches_oracle_on_exact_tables():
    mdp = short_corridor_mdp(0.9)
    probs = np.tile([0.41, 0.59], (4, 1))
    _, q_hat = compute_q_hat(mdp, probs)
    np.testing.assert_allclose(target_from_tables(probs, q_hat).probs,
                               optimal_behaviour_policy(probs, q_hat), atol=1e-10)


def test_no_qhat_target_is_pi():
    probs = np.array([[0.2, 0.8]])
    t = target_from_tables(probs, np.array([[9.0, 1.0]]), no_qhat=True)
    np.testing.assert_array_equal(t.probs, probs)


def test_cross_entropy_gradient_vanishes_at_target():
    mu = CategoricalPolicy(3, 2, "mlp", hidden=())
    mu.params["W0"][:] = np.log([[0.2, 0.8], [0.5, 0.5], [0.9, 0.1]])
    obs = np.eye(3)
    _, grads = cross_entropy_grads(mu, obs, mu.probs(obs))
    assert max(np.max(np.abs(g)) for g in grads.values()) <= 1e-8


def test_uniform_target_reached_from_any_start():
    mu = CategoricalPolicy(2, 3, "mlp", hidden=(), zero_init=False, seed=5)
    obs = np.eye(2)
    opt = OptimizerState(mu.params, lr=0.05)
    target = target_from_tables(np.full((2, 3), 1 / 3), np.ones((2, 3)))
    for _ in range(2000):
        discrete_mu_step(mu, opt, obs, target)
    np.testing.assert_allclose(mu.probs(obs), 1 / 3, atol=1e-3)


def test_discrete_fixture_matches_oracle_and_covers_support():
    result = tabular_fixture()
    assert result.mu_tv <= 0.02
    live = result.live
    need = result.oracle.mu_hat[live] > 1e-6
    assert np.all(result.mu[live][need] >= 1e-6)


def test_gaussian_fixture_recovers_closed_form_mean():
    r = gaussian_fixture(k=2.0)
    assert abs(r.mu_mean - 1.0) <= 0.05
    assert abs(r.mu_std - 1.0) <= 0.05


def test_constant_q_hat_matches_pi():
    r = gaussian_fixture(constant=True)
    assert abs(r.mu_mean - r.pi_mean) <= 0.02 * r.pi_std
    assert abs(r.mu_std - r.pi_std) <= 0.02 * r.pi_std


def test_score_estimator_also_converges():
    r = gaussian_fixture(k=2.0, mode="score", epochs=600)
    assert abs(r.mu_mean - 1.0) <= 0.1


def test_fixed_measure_gradient_runs_away():
    # with the stored actions held fixed the loss is unbounded below
    r = gaussian_fixture(k=2.0, mode="fixed", epochs=200)
    assert r.losses[-1] < r.losses[0] - 1.0
    assert abs(r.mu_std - 1.0) > 0.5


def test_gradient_vanishes_in_expectation_at_minimizer():
    pi = GaussianPolicy(1, 1, hidden=(), init_log_std=0.0)
    mu = pi.clone()
    n = 10**6
    obs = np.zeros((n, 1))
    _, grads = continuous_mu_grads(mu, pi, AnalyticQHat(constant=True), obs, np.zeros((n, 1)),
                                   BehaviourConfig(), np.random.default_rng(0))
    # with mu = pi = N(0, 1) the per-sample terms are eps and eps^2 - 1
    assert abs(grads["b0"][0]) <= 3 / np.sqrt(n)
    assert abs(grads["log_std"][0]) <= 3 * np.sqrt(2) / np.sqrt(n)


def test_certificate_on_grid():
    rng = np.random.default_rng(0)
    for _ in range(5):
        pi = rng.dirichlet(np.ones(6), size=3)
        q_hat = rng.uniform(0.1, 10, size=(3, 6))
        opt = target_from_tables(pi, q_hat).probs
        best = grid_loss(opt, pi, q_hat)
        for _ in range(50):
            other = np.abs(opt + rng.normal(scale=0.1, size=opt.shape))
            other /= other.sum(axis=1, keepdims=True)
            assert best <= grid_loss(other, pi, q_hat) + 1e-12


def test_mode_validated():
    with pytest.raises(ValueError):
        BehaviourConfig(mode="bogus")
