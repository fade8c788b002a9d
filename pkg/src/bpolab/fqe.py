"""Replay buffer and fitted Q-evaluation of q_pi and q_hat_pi."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .approx import OptimizerState, PolyakState, QNet, polyak_update, symlog


class ReplayBuffer:
    """FIFO ring buffer of transitions.

    ``actions`` are integers for discrete spaces (``action_dim=0``) and
    float vectors otherwise. ``r_max`` and ``rhat_max`` track the running
    maxima of ``|r|`` and ``|r_hat|`` since construction.
    """

    def __init__(self, capacity: int, obs_dim: int, action_dim: int = 0):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity, self.obs_dim, self.action_dim = capacity, obs_dim, action_dim
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = (np.zeros(capacity, dtype=int) if action_dim == 0
                        else np.zeros((capacity, action_dim)))
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.log_mu = np.zeros(capacity)
        self.log_pi = np.zeros(capacity)
        self.r_hat = np.zeros(capacity)
        self.has_r_hat = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0
        self.r_max = 0.0
        self.rhat_max = 0.0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, actions, rewards, next_obs, dones, log_mu, log_pi) -> None:
        """Append ``n`` transitions (leading axis), evicting the oldest."""
        obs = np.asarray(obs, dtype=float).reshape(-1, self.obs_dim)
        n = len(obs)
        if n > self.capacity:
            args = [np.asarray(x)[n - self.capacity:] for x in
                    (obs, actions, rewards, next_obs, dones, log_mu, log_pi)]
            return self.add(*args)
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.obs[idx] = obs
        self.next_obs[idx] = np.asarray(next_obs, dtype=float).reshape(n, self.obs_dim)
        self.actions[idx] = np.asarray(actions).reshape(self.actions[idx].shape)
        rewards = np.asarray(rewards, dtype=float).reshape(n)
        self.rewards[idx] = rewards
        self.dones[idx] = np.asarray(dones, dtype=bool).reshape(n)
        self.log_mu[idx] = np.asarray(log_mu, dtype=float).reshape(n)
        self.log_pi[idx] = np.asarray(log_pi, dtype=float).reshape(n)
        self.has_r_hat[idx] = False
        self.cursor = int((self.cursor + n) % self.capacity)
        self.size = min(self.capacity, self.size + n)
        if n:
            self.r_max = max(self.r_max, float(np.max(np.abs(rewards))))

    def add_batch(self, batch) -> None:
        """Append every step of a :class:`~bpolab.returns.RolloutBatch`."""
        self.add(batch.flat("obs"), batch.flat("actions"), batch.flat("rewards"),
                 batch.flat("next_obs"), batch.flat("dones"), batch.flat("log_mu"),
                 batch.flat("log_pi"))

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=batch_size)


@dataclass
class FqeConfig:
    n_qvf_epochs: int = 1
    batch_size: int = 256
    lr: float = 1e-3
    weight_td: bool = True
    clip_targets: bool = True
    n_target_samples: int = 4
    symlog_reg: float = 1.0
    polyak_tau: float = 0.02
    batches_per_epoch: Optional[int] = None

    def __post_init__(self):
        if self.batch_size < 1 or self.n_qvf_epochs < 0 or self.n_target_samples < 1:
            raise ValueError("FQE counts must be positive")

    def n_batches(self, buffer_size: int) -> int:
        if self.batches_per_epoch is not None:
            return self.batches_per_epoch
        return max(1, buffer_size // self.batch_size)


@dataclass
class FqeHead:
    """A Q head with its Polyak target copy and optimizer."""

    net: QNet
    target: QNet
    polyak: PolyakState
    opt: OptimizerState

    @classmethod
    def create(cls, net: QNet, lr: float, tau: float, eps: float = 1e-5,
               max_grad: float = 0.5) -> "FqeHead":
        target = net.clone()
        return cls(net, target, PolyakState(target.params, tau),
                   OptimizerState(net.params, lr=lr, eps=eps, max_grad=max_grad))


def _expected_next(head: FqeHead, policy, next_obs, n_samples, rng):
    """``E_{a'~pi}[Q_target(s', a')]`` in value space (exact sum when discrete)."""
    if head.target.discrete:
        return np.sum(policy.probs(next_obs) * head.target.predict_all(next_obs), axis=1)
    total = np.zeros(len(next_obs))
    for _ in range(n_samples):
        a_next, _ = policy.sample(next_obs, rng)
        total += head.target.predict(next_obs, a_next)
    return total / n_samples


def td_weights(policy, buffer: ReplayBuffer, idx, enabled: bool) -> np.ndarray:
    """Current-pi over mu ratios normalized to mean 1 (ones when disabled)."""
    if not enabled:
        return np.ones(len(idx))
    log_pi = policy.log_prob(buffer.obs[idx], buffer.actions[idx])
    w = np.exp(log_pi - buffer.log_mu[idx])
    mean = w.mean()
    return w / mean if mean > 0 else np.ones(len(idx))


def fqe_loss_grads(head: FqeHead, obs, actions, targets, weights, symlog_reg: float):
    """Weighted squared error on raw outputs plus the pull toward the target net.

    Targets are in value space; symlog heads regress ``symlog(target)``.
    Returns ``(loss, grads)``.
    """
    raw, cache = head.net.raw(obs, actions)
    goal = symlog(targets) if head.net.symlog_head else targets
    raw_target, _ = head.target.raw(obs, actions)
    err = raw - goal
    reg = raw - raw_target
    n = len(raw)
    loss = 0.5 * np.mean(weights * err * err) + 0.5 * symlog_reg * np.mean(reg * reg)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite FQE loss")
    grads, _ = head.net.backward(cache, (weights * err + symlog_reg * reg) / n)
    return float(loss), grads


def _fqe_epoch(head, policy, buffer, config, discount, rng, rewards, bound):
    losses = []
    for _ in range(config.n_batches(len(buffer))):
        idx = buffer.sample_indices(config.batch_size, rng)
        nxt = _expected_next(head, policy, buffer.next_obs[idx], config.n_target_samples, rng)
        targets = rewards[idx] + discount * np.where(buffer.dones[idx], 0.0, nxt)
        if bound is not None:
            targets = head.net.clip(targets, bound)
        weights = td_weights(policy, buffer, idx, config.weight_td)
        loss, grads = fqe_loss_grads(head, buffer.obs[idx], buffer.actions[idx], targets,
                                     weights, config.symlog_reg)
        head.opt.step(grads, config.lr)
        polyak_update(head.polyak, head.net.params)
        losses.append(loss)
    return {"loss": float(np.mean(losses)), "batches": len(losses)}


def q_bound(buffer: ReplayBuffer, gamma: float) -> float:
    return buffer.r_max / (1.0 - gamma)


def qhat_bound(buffer: ReplayBuffer, gamma: float) -> float:
    return buffer.rhat_max / (1.0 - gamma**2)


def fqe_q_epoch(head: FqeHead, policy, buffer: ReplayBuffer, config: FqeConfig, gamma: float,
                rng: np.random.Generator) -> dict:
    """One epoch of ``Q <- r + gamma E_pi[Q_target(s', .)]`` regression."""
    bound = q_bound(buffer, gamma) if config.clip_targets else None
    return _fqe_epoch(head, policy, buffer, config, gamma, rng, buffer.rewards, bound)


def compute_r_hat(buffer: ReplayBuffer, qnet: QNet, clip_bound: Optional[float] = None) -> np.ndarray:
    """Fill ``r_hat = 2 r Q(s, a) - r^2`` for every stored transition."""
    n = len(buffer)
    if n == 0:
        return np.zeros(0)
    q = qnet.predict(buffer.obs[:n], buffer.actions[:n], clip_bound)
    r = buffer.rewards[:n]
    r_hat = 2.0 * r * q - r * r
    buffer.r_hat[:n] = r_hat
    buffer.has_r_hat[:n] = True
    buffer.rhat_max = max(buffer.rhat_max, float(np.max(np.abs(r_hat))))
    return r_hat


def fqe_qhat_epoch(head: FqeHead, policy, buffer: ReplayBuffer, config: FqeConfig, gamma: float,
                   rng: np.random.Generator) -> dict:
    """One epoch of ``Q_hat <- r_hat + gamma^2 E_pi[Q_hat_target(s', .)]``."""
    if not np.all(buffer.has_r_hat[:len(buffer)]):
        raise ValueError("r_hat missing for some transitions; call compute_r_hat first")
    bound = qhat_bound(buffer, gamma) if config.clip_targets else None
    return _fqe_epoch(head, policy, buffer, config, gamma**2, rng, buffer.r_hat, bound)
