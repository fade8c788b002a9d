"""Small fixtures where learned quantities can be compared with exact ones.

``tabular_fixture`` trains the Q and q_hat heads and a discrete behaviour
policy on the one-hot corridor with a fixed target policy.
``gaussian_fixture`` trains a continuous behaviour policy against a known
closed-form q_hat.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .approx import CategoricalPolicy, GaussianPolicy, OptimizerState, QNet
from .behaviour import BehaviourConfig, continuous_mu_epoch, discrete_mu_epoch, target_from_tables
from .fqe import FqeConfig, FqeHead, ReplayBuffer, compute_r_hat, fqe_q_epoch, fqe_qhat_epoch
from .mdp import TabularEnv, short_corridor_mdp
from .oracle import OracleBundle, oracle_bundle


def fixed_tabular_policy(probs: np.ndarray) -> CategoricalPolicy:
    """Softmax policy on one-hot states whose bias logits reproduce ``probs``."""
    S, A = probs.shape
    pi = CategoricalPolicy(S, A, "mlp", hidden=())
    with np.errstate(divide="ignore"):
        pi.params["W0"][:] = np.log(np.maximum(probs, 1e-300))
    return pi


def fill_buffer(env: TabularEnv, policy, n_transitions: int, rng) -> ReplayBuffer:
    """On-policy transitions from whole episodes, cut at ``n_transitions``."""
    buf = ReplayBuffer(n_transitions, env.obs_dim)
    state = env.reset(rng)
    for _ in range(n_transitions):
        obs = env.observe(state)[None, :]
        action, logp = policy.sample(obs, rng)
        step = env.step(int(action[0]), rng)
        buf.add(obs, action, [step.reward], env.observe(step.next_state)[None, :], [step.done], logp, logp)
        state = env.reset(rng) if (step.done or step.truncated) else step.next_state
    return buf


def _decayed(lr0: float, lr1: float, i: int, n: int) -> float:
    return lr0 * (lr1 / lr0) ** (i / max(1, n - 1))


@dataclass
class TabularFixtureResult:
    oracle: OracleBundle
    q: np.ndarray
    q_hat: np.ndarray
    mu: np.ndarray
    live: np.ndarray
    history: dict = field(default_factory=dict)

    @property
    def q_error(self) -> float:
        return float(np.max(np.abs(self.q - self.oracle.q)[self.live]))

    @property
    def q_hat_error(self) -> float:
        return float(np.max(np.abs(self.q_hat - self.oracle.q_hat)[self.live]))

    @property
    def mu_tv(self) -> float:
        """Largest per-state total-variation distance to the oracle mu_hat."""
        tv = 0.5 * np.sum(np.abs(self.mu - self.oracle.mu_hat), axis=1)
        return float(np.max(tv[self.live]))


def tabular_fixture(p_right: float = 0.59, discount: float = 0.9, n_transitions: int = 4096,
                    q_epochs: int = 300, qhat_epochs: int = 300, mu_epochs: int = 200,
                    lr: tuple = (3e-2, 1e-4), mu_lr: tuple = (3e-2, 1e-3),
                    seed: int = 0) -> TabularFixtureResult:
    """FQE and behaviour-policy training on the one-hot corridor.

    The corridor has deterministic transitions, so each FQE target is a
    single number per (s, a) and the symlog regression has no averaging
    bias. Learning rates decay geometrically over the epochs.
    """
    rng = np.random.default_rng(seed)
    mdp = short_corridor_mdp(discount)
    env = TabularEnv(mdp, horizon=10_000)
    probs = np.tile([1.0 - p_right, p_right], (mdp.n_states, 1))
    oracle = oracle_bundle(mdp, probs)
    pi = fixed_tabular_policy(probs)
    buf = fill_buffer(env, pi, n_transitions, rng)

    cfg = FqeConfig(batch_size=256)
    q = FqeHead.create(QNet(mdp.n_states, n_actions=2, hidden=()), lr=lr[0], tau=0.02)
    q_loss = []
    for i in range(q_epochs):
        cfg.lr = _decayed(*lr, i, q_epochs)
        q_loss.append(fqe_q_epoch(q, pi, buf, cfg, discount, rng)["loss"])
    compute_r_hat(buf, q.net)
    qh = FqeHead.create(QNet(mdp.n_states, n_actions=2, hidden=(), kind="qhat"), lr=lr[0], tau=0.02)
    qh_loss = []
    for i in range(qhat_epochs):
        cfg.lr = _decayed(*lr, i, qhat_epochs)
        qh_loss.append(fqe_qhat_epoch(qh, pi, buf, cfg, discount, rng)["loss"])

    mu = CategoricalPolicy(mdp.n_states, 2, "mlp", hidden=())
    bcfg = BehaviourConfig(batch_size=256)
    opt = OptimizerState(mu.params, lr=mu_lr[0])
    mu_loss = []
    for i in range(mu_epochs):
        bcfg.lr = _decayed(*mu_lr, i, mu_epochs)
        mu_loss.append(discrete_mu_epoch(mu, pi, qh.net, buf, opt, bcfg, rng)["loss"])

    eye = np.eye(mdp.n_states)
    return TabularFixtureResult(oracle, q.net.predict_all(eye), qh.net.predict_all(eye), mu.probs(eye),
                                ~mdp.terminal, {"q": q_loss, "q_hat": qh_loss, "mu": mu_loss})


class AnalyticQHat:
    """``q_hat(s, a) = exp(k a)`` with the two methods the behaviour loss uses."""

    def __init__(self, k: float = 2.0, constant: bool = False):
        self.k, self.constant = k, constant

    def predict(self, obs, actions):
        a = np.asarray(actions, dtype=float).reshape(len(obs), -1)[:, 0]
        return np.ones_like(a) if self.constant else np.exp(self.k * a)

    def value_and_action_grad(self, obs, actions):
        value = self.predict(obs, actions)
        grad = np.zeros_like(value) if self.constant else self.k * value
        return value, grad[:, None]


@dataclass
class GaussianFixtureResult:
    mu_mean: float
    mu_std: float
    pi_mean: float
    pi_std: float
    optimum_mean: float
    losses: list


def gaussian_fixture(k: float = 2.0, constant: bool = False, epochs: int = 400, batch_size: int = 256,
                     lr: tuple = (3e-2, 1e-3), mode: str = "pathwise", seed: int = 0) -> GaussianFixtureResult:
    """pi = N(0, 1) on a single dummy state; q_hat = exp(k a).

    pi * sqrt(q_hat) is proportional to N(k/2, 1), so the optimum mean is
    k/2 (and 0 when q_hat is constant). mu starts at N(0, e^-1).
    """
    rng = np.random.default_rng(seed)
    pi = GaussianPolicy(1, 1, hidden=(), init_log_std=0.0)
    mu = GaussianPolicy(1, 1, hidden=())
    buf = ReplayBuffer(batch_size, 1, action_dim=1)
    buf.add(np.zeros((batch_size, 1)), rng.normal(size=(batch_size, 1)), np.zeros(batch_size),
            np.zeros((batch_size, 1)), np.ones(batch_size, bool), np.zeros(batch_size), np.zeros(batch_size))
    qhat = AnalyticQHat(k, constant)
    cfg = BehaviourConfig(batch_size=batch_size, mode=mode)
    opt = OptimizerState(mu.params, lr=lr[0])
    losses = []
    for i in range(epochs):
        cfg.lr = _decayed(*lr, i, epochs)
        losses.append(continuous_mu_epoch(mu, pi, qhat, buf, opt, cfg, rng)["loss"])
    m, s, _ = mu.mean_std(np.zeros((1, 1)))
    pm, ps, _ = pi.mean_std(np.zeros((1, 1)))
    return GaussianFixtureResult(float(m[0, 0]), float(s[0]), float(pm[0, 0]), float(ps[0]),
                                 0.0 if constant else k / 2, losses)


def behaviour_target_for(oracle: OracleBundle, probs: np.ndarray) -> np.ndarray:
    """Behaviour target computed by the learning-side code from exact tables."""
    return target_from_tables(probs, oracle.q_hat).probs


