"""Behaviour-policy updates toward ``mu ∝ pi sqrt(q_hat)``.

Discrete actions: cross-entropy ``-sum_a q(a|s) ln mu(a|s)`` against the
analytic target. Continuous actions: the loss
``E_{a~mu}[ln mu(a|s) - ln pi(a|s) - 0.5 ln q_hat(s, a)]``, which equals
``KL(mu || pi sqrt(q_hat) / Z) - ln Z`` and is minimized by the target.

Gradient estimators for the continuous loss (``mode``):

* ``"pathwise"`` (default): resample ``a = m + sigma * eps`` and
  differentiate through the sample. With
  ``g = -(d/da ln pi + 0.5 d/da ln q_hat)``, the per-sample gradients are
  ``dL/dm = g`` and ``dL/dlog_sigma = -1 + g * sigma * eps``.
* ``"score"``: resample from mu and use the score-function estimator with a
  batch-mean baseline.
* ``"fixed"``: the gradient of the empirical loss with the stored actions
  held fixed. Only ``ln mu`` depends on the parameters, so the loss is
  unbounded below and mu runs away from the stored actions; kept for
  ablations.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .approx import OptimizerState

QHAT_FLOOR = 1e-8
FALLBACK_NORM = 1e-12


@dataclass
class BehaviourConfig:
    n_mu_epochs: int = 1
    batch_size: int = 256
    lr: float = 1e-3
    mode: str = "pathwise"
    no_qhat: bool = False
    qhat_floor: float = QHAT_FLOOR
    batches_per_epoch: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("pathwise", "score", "fixed"):
            raise ValueError(f"unknown continuous loss mode {self.mode!r}")

    def n_batches(self, buffer_size: int) -> int:
        if self.batches_per_epoch is not None:
            return self.batches_per_epoch
        return max(1, buffer_size // self.batch_size)


@dataclass
class BehaviourTarget:
    probs: np.ndarray
    norm: np.ndarray
    fallback: np.ndarray


def target_from_tables(pi_probs: np.ndarray, q_hat: np.ndarray, no_qhat: bool = False) -> BehaviourTarget:
    """``q(a|s) ∝ pi(a|s) sqrt(q_hat(s, a))`` with fallback to pi when Z <= 1e-12."""
    pi_probs = np.asarray(pi_probs, dtype=float)
    if no_qhat:
        return BehaviourTarget(pi_probs.copy(), np.ones(len(pi_probs)), np.zeros(len(pi_probs), bool))
    weights = pi_probs * np.sqrt(np.maximum(q_hat, 0.0))
    norm = weights.sum(axis=1)
    fallback = norm <= FALLBACK_NORM
    safe = np.where(fallback, 1.0, norm)
    probs = np.where(fallback[:, None], pi_probs, weights / safe[:, None])
    return BehaviourTarget(probs, norm, fallback)


def discrete_target(pi_policy, qhat_net, obs, no_qhat: bool = False) -> BehaviourTarget:
    return target_from_tables(pi_policy.probs(obs), qhat_net.predict_all(obs), no_qhat)


def cross_entropy_grads(mu_policy, obs, target_probs):
    """Mean cross-entropy ``-sum q ln mu`` and its parameter gradients."""
    _, _, cache = mu_policy.log_prob_entropy(obs, np.zeros(len(target_probs), dtype=int))
    logp_all = cache["logp_all"]
    loss = -float(np.mean(np.sum(target_probs * logp_all, axis=1)))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite behaviour loss")
    # softmax cross-entropy: d/dlogits = mu - q (targets sum to one)
    dlogits = (cache["p"] - target_probs) / len(target_probs)
    return loss, mu_policy.backward_logits(cache, dlogits)


def discrete_mu_step(mu_policy, opt: OptimizerState, obs, target: BehaviourTarget, lr=None) -> float:
    loss, grads = cross_entropy_grads(mu_policy, obs, target.probs)
    opt.step(grads, lr)
    return loss


def discrete_mu_epoch(mu_policy, pi_policy, qhat_net, buffer, opt: OptimizerState,
                      config: BehaviourConfig, rng: np.random.Generator) -> dict:
    losses, fallbacks = [], 0
    for _ in range(config.n_batches(len(buffer))):
        idx = buffer.sample_indices(config.batch_size, rng)
        obs = buffer.obs[idx]
        target = discrete_target(pi_policy, qhat_net, obs, config.no_qhat)
        fallbacks += int(target.fallback.sum())
        losses.append(discrete_mu_step(mu_policy, opt, obs, target, config.lr))
    return {"loss": float(np.mean(losses)), "fallback_states": fallbacks}


def _log_qhat_action_grad(qhat_net, obs, actions, floor):
    """``0.5 * d/da ln max(q_hat, floor)``; zero where q_hat is at the floor."""
    value, dval = qhat_net.value_and_action_grad(obs, actions)
    ok = value > floor
    return np.where(ok[:, None], 0.5 * dval / np.maximum(value, floor)[:, None], 0.0), value


def continuous_loss_values(mu_policy, pi_policy, qhat_net, obs, actions, config: BehaviourConfig):
    """Per-sample ``ln mu - ln pi - 0.5 ln q_hat`` at the given actions."""
    f = mu_policy.log_prob(obs, actions) - pi_policy.log_prob(obs, actions)
    if not config.no_qhat:
        f = f - 0.5 * np.log(np.maximum(qhat_net.predict(obs, actions), config.qhat_floor))
    return f


def continuous_mu_grads(mu_policy, pi_policy, qhat_net, obs, actions, config: BehaviourConfig,
                        rng: np.random.Generator):
    """Loss estimate and gradient for one batch of states (and stored actions)."""
    n = len(obs)
    mean, std, net_cache = mu_policy.mean_std(obs)
    if config.mode == "fixed":
        loss = float(np.mean(continuous_loss_values(mu_policy, pi_policy, qhat_net, obs, actions, config)))
        _, _, cache = mu_policy.log_prob_entropy(obs, actions)
        return loss, mu_policy.backward(cache, np.full(n, 1.0 / n))
    eps = rng.standard_normal(mean.shape)
    a = mean + std * eps
    if config.mode == "score":
        f = continuous_loss_values(mu_policy, pi_policy, qhat_net, obs, a, config)
        _, _, cache = mu_policy.log_prob_entropy(obs, a)
        # d/dxi E[f] = E[(f - b) dln mu] + E[dln mu]; the last term has mean zero
        coef = (f - f.mean() + 1.0) / n
        return float(np.mean(f)), mu_policy.backward(cache, coef)
    pi_mean, pi_std, _ = pi_policy.mean_std(obs)
    dlogpi = -(a - pi_mean) / pi_std**2
    g = -dlogpi
    f = continuous_loss_values(mu_policy, pi_policy, qhat_net, obs, a, config)
    if not config.no_qhat:
        dlogq, _ = _log_qhat_action_grad(qhat_net, obs, a, config.qhat_floor)
        g = g - dlogq
    dmean = g / n
    dlog_std = (-1.0 + g * std * eps) / n
    loss = float(np.mean(f))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite behaviour loss")
    return loss, mu_policy.backward_dist({"net": net_cache}, dmean, dlog_std)


def continuous_mu_epoch(mu_policy, pi_policy, qhat_net, buffer, opt: OptimizerState,
                        config: BehaviourConfig, rng: np.random.Generator) -> dict:
    losses = []
    for _ in range(config.n_batches(len(buffer))):
        idx = buffer.sample_indices(config.batch_size, rng)
        loss, grads = continuous_mu_grads(mu_policy, pi_policy, qhat_net, buffer.obs[idx],
                                          buffer.actions[idx], config, rng)
        opt.step(grads, config.lr)
        losses.append(loss)
    return {"loss": float(np.mean(losses))}


def grid_loss(mu_probs: np.ndarray, pi_probs: np.ndarray, q_hat: np.ndarray,
              floor: float = QHAT_FLOOR) -> float:
    """Exact continuous-form loss on a discrete grid, averaged over states.

    ``sum_a mu (ln mu - ln pi - 0.5 ln q_hat)``, with ``0 ln 0 = 0``.
    """
    mu_probs = np.asarray(mu_probs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.log(mu_probs) - np.log(pi_probs) - 0.5 * np.log(np.maximum(q_hat, floor))
    terms = np.where(mu_probs > 0, mu_probs * f, 0.0)
    return float(np.mean(terms.sum(axis=1)))
