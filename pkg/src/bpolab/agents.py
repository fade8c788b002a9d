"""REINFORCE, PPO and their behaviour-policy-optimized variants."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from .approx import (CategoricalPolicy, GaussianPolicy, OptimizerState, ParamNet, QNet)
from .behaviour import BehaviourConfig, continuous_mu_epoch, discrete_mu_epoch
from .fqe import (FqeConfig, FqeHead, ReplayBuffer, compute_r_hat, fqe_q_epoch, fqe_qhat_epoch,
                  q_bound)
from .returns import RolloutBatch, TruncationConfig, advantages, batch_returns, raw_ratios

AGENTS = ("reinforce", "bpo-reinforce", "ppo", "bpo-ppo")


@dataclass
class PhaseConfig:
    """Hyperparameters of one agent; names follow the usual table entries."""

    agent: str = "ppo"
    # collection
    num_steps: int = 2048
    num_envs: int = 1
    # policy update
    n_epochs: int = 10
    batch_size: int = 64
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    beta_value: float = 0.5
    beta_ent: float = 0.001
    lr: float = 3e-4
    lr_value: float = 3e-4
    normalize_adv: bool = True
    # REINFORCE
    lr_max: float = 0.1
    lr_min: float = 0.01
    reinforce_optimizer: str = "adam"
    reinforce_per_step: bool = False
    # truncation
    rho_bar: float = 1.0
    c_bar: float = 1.0
    traj: bool = False
    # networks
    hidden: tuple = (64, 64)
    policy_mode: str = "mlp"
    init_policy_weights: Optional[list] = None
    init_log_std: float = -1.0
    max_grad: float = 0.5
    adam_eps: float = 1e-5
    # BPO auxiliaries
    replay_size: int = 8192
    q_batch_size: int = 256
    mu_batch_size: int = 128
    n_qvf_epochs: int = 20
    n_mu_epochs: int = 20
    lr_q: float = 3e-4
    q_max_grad: float = 0.5  # 0 disables clipping for the Q heads
    lr_mu: float = 3e-4
    q_hidden: tuple = (64, 64)
    polyak_tau: float = 0.02
    symlog_reg: float = 1.0
    weight_td_update: bool = True
    clip_targets: bool = True
    zero_norm_init: bool = True
    layer_norm: bool = True
    symlog: bool = True
    no_qhat: bool = False
    mu_loss_mode: str = "pathwise"
    n_target_samples: int = 4
    # evaluation and budget
    eval_episodes: int = 10
    n_phases: int = 100

    def __post_init__(self):
        if self.agent not in AGENTS:
            raise ValueError(f"unknown agent {self.agent!r}; expected one of {AGENTS}")
        self.hidden = tuple(self.hidden)
        self.q_hidden = tuple(self.q_hidden)
        for name in ("num_steps", "num_envs", "batch_size", "eval_episodes", "n_phases",
                     "replay_size", "q_batch_size", "mu_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("n_epochs", "n_qvf_epochs", "n_mu_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (0.0 < self.clip_eps < 1.0):
            raise ValueError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        if self.beta_value < 0 or self.beta_ent < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.reinforce_optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown REINFORCE optimizer {self.reinforce_optimizer!r}")

    @property
    def is_bpo(self) -> bool:
        return self.agent.startswith("bpo")

    @property
    def is_reinforce(self) -> bool:
        return self.agent.endswith("reinforce")

    def truncation(self) -> TruncationConfig:
        lam = 1.0 if self.is_reinforce else self.lam
        return TruncationConfig(lam=lam, c_bar=self.c_bar, rho_bar=self.rho_bar, traj=self.traj)

    def fqe(self) -> FqeConfig:
        return FqeConfig(n_qvf_epochs=self.n_qvf_epochs, batch_size=self.q_batch_size, lr=self.lr_q,
                         weight_td=self.weight_td_update, clip_targets=self.clip_targets,
                         n_target_samples=self.n_target_samples, symlog_reg=self.symlog_reg,
                         polyak_tau=self.polyak_tau)

    def behaviour(self) -> BehaviourConfig:
        return BehaviourConfig(n_mu_epochs=self.n_mu_epochs, batch_size=self.mu_batch_size,
                               lr=self.lr_mu, mode=self.mu_loss_mode, no_qhat=self.no_qhat)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Streams:
    """Independent generators for each source of randomness in a run."""

    init: np.random.Generator
    collect: np.random.Generator
    envs: list
    update: np.random.Generator
    eval: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int, n_envs: int) -> "Streams":
        children = np.random.SeedSequence(seed).spawn(4 + n_envs)
        gens = [np.random.default_rng(c) for c in children]
        return cls(gens[0], gens[1], gens[4:], gens[2], gens[3])


@dataclass
class TrainState:
    pi: object
    pi_opt: OptimizerState
    streams: Streams
    v: Optional[ParamNet] = None
    v_opt: Optional[OptimizerState] = None
    mu: Optional[object] = None
    mu_opt: Optional[OptimizerState] = None
    q: Optional[FqeHead] = None
    qhat: Optional[FqeHead] = None
    buffer: Optional[ReplayBuffer] = None
    phase: int = 0
    env_steps: int = 0
    episodes: int = 0
    trace: list = field(default_factory=list)
    # per-stream environment progress during collection
    env_obs: Optional[list] = None


def build_policy(env, config: PhaseConfig, seed: int):
    if env.action_kind == "discrete":
        pol = CategoricalPolicy(env.obs_dim, env.n_actions, config.policy_mode, config.hidden,
                                seed=seed)
        if config.init_policy_weights is not None:
            w = np.asarray(config.init_policy_weights, dtype=float)
            key = "w" if config.policy_mode == "action_features" else f"b{len(config.hidden)}"
            pol.params[key][...] = w
        return pol
    return GaussianPolicy(env.obs_dim, env.action_dim, config.hidden,
                          init_log_std=config.init_log_std, seed=seed)


def init_state(env, config: PhaseConfig, seed: int) -> TrainState:
    """Fresh networks, optimizers and RNG streams for one run."""
    streams = Streams.from_seed(seed, config.num_envs)
    net_seed = int(streams.init.integers(2**31))
    pi = build_policy(env, config, net_seed)
    if config.is_reinforce:
        pi_opt = OptimizerState(pi.params, lr=config.lr_max, eps=config.adam_eps, max_grad=None)
    else:
        pi_opt = OptimizerState(pi.params, lr=config.lr, eps=config.adam_eps, max_grad=config.max_grad)
    state = TrainState(pi=pi, pi_opt=pi_opt, streams=streams)
    if not config.is_reinforce:
        state.v = ParamNet(env.obs_dim, 1, config.hidden, seed=net_seed + 1)
        state.v_opt = OptimizerState(state.v.params, lr=config.lr_value, eps=config.adam_eps,
                                     max_grad=config.max_grad)
    if config.is_bpo:
        # same architecture and seed: mu starts bitwise equal to pi
        state.mu = pi.clone()
        state.mu_opt = OptimizerState(state.mu.params, lr=config.lr_mu, eps=config.adam_eps,
                                      max_grad=config.max_grad)
        discrete = env.action_kind == "discrete"
        kw = dict(n_actions=env.n_actions if discrete else 0,
                  action_dim=0 if discrete else env.action_dim, hidden=config.q_hidden,
                  layer_norm=config.layer_norm, zero_init=config.zero_norm_init,
                  symlog_head=config.symlog)
        q = QNet(env.obs_dim, kind="q", seed=net_seed + 2, **kw)
        qhat = QNet(env.obs_dim, kind="qhat", seed=net_seed + 3, **kw)
        q_clip = config.q_max_grad if config.q_max_grad > 0 else None
        state.q = FqeHead.create(q, config.lr_q, config.polyak_tau, config.adam_eps, q_clip)
        state.qhat = FqeHead.create(qhat, config.lr_q, config.polyak_tau, config.adam_eps, q_clip)
        state.buffer = ReplayBuffer(config.replay_size, env.obs_dim,
                                    0 if discrete else env.action_dim)
    return state


def _select(state: TrainState, selector: str):
    if selector == "target":
        return state.pi
    if selector == "behaviour":
        if state.mu is None:
            raise ValueError("behaviour policy requested but the agent has none")
        return state.mu
    raise ValueError(f"unknown policy selector {selector!r}")


def _log_probs(state, selector, obs, actions, logp_sampled):
    """``(log_mu, log_pi)`` for the sampled actions."""
    if selector == "target":
        return logp_sampled, logp_sampled
    return logp_sampled, state.pi.log_prob(obs, actions)


def collect_rollout(state: TrainState, envs: list, selector: str, num_steps: int) -> RolloutBatch:
    """``num_steps`` steps on each of ``len(envs)`` streams, auto-resetting.

    Each stream uses its own generator for dynamics; actions for all
    streams come from the collection generator.
    """
    B = len(envs)
    pol = _select(state, selector)
    if state.env_obs is None or len(state.env_obs) != B:
        state.env_obs = [env.observe(env.reset(g)) for env, g in zip(envs, state.streams.envs)]
    obs_dim = envs[0].obs_dim
    continuous = envs[0].action_kind == "continuous"
    act_shape = (num_steps, B, envs[0].action_dim) if continuous else (num_steps, B)
    rec = dict(obs=np.zeros((num_steps, B, obs_dim)), next_obs=np.zeros((num_steps, B, obs_dim)),
               actions=np.zeros(act_shape) if continuous else np.zeros(act_shape, dtype=int),
               rewards=np.zeros((num_steps, B)), dones=np.zeros((num_steps, B), bool),
               truncs=np.zeros((num_steps, B), bool), log_mu=np.zeros((num_steps, B)),
               log_pi=np.zeros((num_steps, B)))
    for t in range(num_steps):
        obs = np.stack(state.env_obs)
        actions, logp = pol.sample(obs, state.streams.collect)
        log_mu, log_pi = _log_probs(state, selector, obs, actions, logp)
        rec["obs"][t], rec["actions"][t] = obs, actions
        rec["log_mu"][t], rec["log_pi"][t] = log_mu, log_pi
        for b, env in enumerate(envs):
            step = env.step(actions[b], state.streams.envs[b])
            nxt = env.observe(step.next_state)
            rec["rewards"][t, b], rec["next_obs"][t, b] = step.reward, nxt
            rec["dones"][t, b], rec["truncs"][t, b] = step.done, step.truncated
            if step.done or step.truncated:
                state.episodes += 1
                nxt = env.observe(env.reset(state.streams.envs[b]))
            state.env_obs[b] = nxt
    state.env_steps += num_steps * B
    batch = RolloutBatch(**rec)
    if state.buffer is not None:
        state.buffer.add_batch(batch)
    return batch


def collect_episode(state: TrainState, env, selector: str) -> RolloutBatch:
    """One complete episode (terminal or horizon cut) as a ``[T, 1]`` batch."""
    pol = _select(state, selector)
    g = state.streams.envs[0]
    obs = env.observe(env.reset(g))
    rows = []
    while True:
        o = obs[None, :]
        action, logp = pol.sample(o, state.streams.collect)
        log_mu, log_pi = _log_probs(state, selector, o, action, logp)
        step = env.step(action[0], g)
        nxt = env.observe(step.next_state)
        rows.append((obs, action[0], step.reward, nxt, step.done, step.truncated,
                     log_mu[0], log_pi[0]))
        obs = nxt
        if step.done or step.truncated:
            break
    state.episodes += 1
    state.env_steps += len(rows)
    cols = list(zip(*rows))
    batch = RolloutBatch(obs=np.stack(cols[0])[:, None], actions=np.array(cols[1])[:, None],
                         rewards=np.array(cols[2], dtype=float)[:, None],
                         next_obs=np.stack(cols[3])[:, None],
                         dones=np.array(cols[4], bool)[:, None],
                         truncs=np.array(cols[5], bool)[:, None],
                         log_mu=np.array(cols[6], dtype=float)[:, None],
                         log_pi=np.array(cols[7], dtype=float)[:, None])
    if state.buffer is not None:
        state.buffer.add_batch(batch)
    return batch


def reinforce_lr(config: PhaseConfig, phase: int) -> float:
    """Exponential decay from ``lr_max`` at phase 0 to ``lr_min`` at the last phase."""
    if config.n_phases <= 1:
        return config.lr_max
    frac = min(phase, config.n_phases - 1) / (config.n_phases - 1)
    return config.lr_max * (config.lr_min / config.lr_max) ** frac


def reinforce_returns(batch: RolloutBatch, config: PhaseConfig) -> np.ndarray:
    """Truncated-IS returns with lambda = 1 and no value estimates."""
    zeros = np.zeros_like(batch.rewards)
    return batch_returns(batch, zeros, zeros, config.truncation(), config.gamma)


def reinforce_update(state: TrainState, batch: RolloutBatch, config: PhaseConfig) -> dict:
    """Ascent on ``sum_t G_t grad ln pi(A_t|S_t)``.

    One optimizer step per episode by default; ``reinforce_per_step`` takes
    one step per time step instead.
    """
    G = reinforce_returns(batch, config)
    lr = reinforce_lr(config, state.phase)
    obs, actions = batch.flat("obs"), batch.flat("actions")
    g_flat = G.reshape(-1)
    if not config.reinforce_per_step:
        _, _, cache = state.pi.log_prob_entropy(obs, actions)
        grads = state.pi.backward(cache, -g_flat)
        _reinforce_step(state, grads, lr, config)
        return {"lr": lr, "mean_return_estimate": float(np.mean(G))}
    for t in range(len(g_flat)):
        if g_flat[t] == 0.0:
            continue
        _, _, cache = state.pi.log_prob_entropy(obs[t:t + 1], actions[t:t + 1])
        grads = state.pi.backward(cache, np.array([-g_flat[t]]))
        _reinforce_step(state, grads, lr, config)
    return {"lr": lr, "mean_return_estimate": float(np.mean(G))}


def _reinforce_step(state, grads, lr, config):
    if config.reinforce_optimizer == "adam":
        state.pi_opt.step(grads, lr)
        return
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {k!r}")
        state.pi.params[k] -= lr * g


def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, eps: float):
    """Per-sample ``min(r A, clip(r, 1-eps, 1+eps) A)`` and where the unclipped term wins."""
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    use_unclipped = surr1 <= surr2
    return np.minimum(surr1, surr2), use_unclipped


def ppo_loss_grads(pi, v_net, obs, actions, log_mu, adv, returns, config: PhaseConfig):
    """Joint clipped-surrogate, value and entropy loss with gradients.

    Returns ``(metrics, pi_grads, v_grads)``.
    """
    n = len(adv)
    logp, ent, cache = pi.log_prob_entropy(obs, actions)
    ratio = np.exp(logp - log_mu)
    surr, use_unclipped = clipped_surrogate(ratio, adv, config.clip_eps)
    clip_loss = -float(np.mean(surr))
    dlogp = np.where(use_unclipped, -adv * ratio, 0.0) / n
    dent = np.full(n, -config.beta_ent / n)
    pi_grads = pi.backward(cache, dlogp, dent)
    values, v_cache = v_net.forward(obs)
    err = values[:, 0] - returns
    value_loss = float(np.mean(err * err))
    v_grads, _ = v_net.backward(v_cache, (config.beta_value * 2.0 * err / n)[:, None])
    ent_loss = -float(np.mean(ent))
    total = clip_loss + config.beta_value * value_loss + config.beta_ent * ent_loss
    if not np.isfinite(total):
        raise FloatingPointError("non-finite PPO loss")
    metrics = {"loss": total, "clip_loss": clip_loss, "value_loss": value_loss,
               "entropy": -ent_loss, "clip_frac": float(np.mean(~use_unclipped))}
    return metrics, pi_grads, v_grads


def ppo_targets(state: TrainState, batch: RolloutBatch, config: PhaseConfig):
    """Values, TIS-TD(lambda) returns and advantages, computed once per phase."""
    shape = batch.rewards.shape
    values = state.v(batch.flat("obs"))[:, 0].reshape(shape)
    next_values = state.v(batch.flat("next_obs"))[:, 0].reshape(shape)
    G = batch_returns(batch, values, next_values, config.truncation(), config.gamma)
    return values, G, advantages(G, values)


def ppo_update(state: TrainState, batch: RolloutBatch, config: PhaseConfig) -> dict:
    _, G, adv = ppo_targets(state, batch, config)
    obs, actions = batch.flat("obs"), batch.flat("actions")
    log_mu = batch.flat("log_mu")
    G, adv = G.reshape(-1), adv.reshape(-1)
    n = len(adv)
    history = []
    for _ in range(config.n_epochs):
        order = state.streams.update.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            a = adv[idx]
            if config.normalize_adv and len(idx) > 1:
                a = (a - a.mean()) / (a.std() + 1e-8)
            metrics, pg, vg = ppo_loss_grads(state.pi, state.v, obs[idx], actions[idx],
                                             log_mu[idx], a, G[idx], config)
            state.pi_opt.step(pg)
            state.v_opt.step(vg)
            history.append(metrics)
    if not history:
        return {}
    return {k: float(np.mean([h[k] for h in history])) for k in history[0]}


def ratio_stats(batch: RolloutBatch, config: PhaseConfig) -> dict:
    r = raw_ratios(batch.log_pi, batch.log_mu)
    return {"ratio_mean": float(r.mean()), "ratio_max": float(r.max()),
            "ratio_trunc_frac": float(np.mean(r > config.c_bar))}


def auxiliary_steps(state: TrainState, config: PhaseConfig, action_kind: str, log=None) -> dict:
    """FQE for Q and Q_hat, r_hat, then the behaviour-policy epochs."""
    log = state.trace if log is None else log
    fcfg, bcfg = config.fqe(), config.behaviour()
    rng = state.streams.update
    out = {}
    for _ in range(config.n_qvf_epochs):
        out["q_loss"] = fqe_q_epoch(state.q, state.pi, state.buffer, fcfg, config.gamma, rng)["loss"]
        log.append("q_epoch")
    bound = q_bound(state.buffer, config.gamma) if config.clip_targets else None
    compute_r_hat(state.buffer, state.q.net, bound)
    log.append("r_hat")
    for _ in range(config.n_qvf_epochs):
        out["qhat_loss"] = fqe_qhat_epoch(state.qhat, state.pi, state.buffer, fcfg, config.gamma,
                                          rng)["loss"]
        log.append("qhat_epoch")
    epoch = discrete_mu_epoch if action_kind == "discrete" else continuous_mu_epoch
    for _ in range(config.n_mu_epochs):
        out["mu_loss"] = epoch(state.mu, state.pi, state.qhat.net, state.buffer, state.mu_opt,
                               bcfg, rng)["loss"]
        log.append("mu_epoch")
    n = len(state.buffer)
    if state.qhat.net.discrete:
        qh = state.qhat.net.predict_all(state.buffer.obs[:n])
    else:
        qh = state.qhat.net.predict(state.buffer.obs[:n], state.buffer.actions[:n])
    out["qhat_mean"], out["qhat_max"] = float(np.mean(qh)), float(np.max(qh))
    return out


def bpo_phase(state: TrainState, envs, config: PhaseConfig) -> dict:
    """One phase: collect with mu, update pi, then the auxiliary steps."""
    env0 = envs[0] if isinstance(envs, (list, tuple)) else envs
    if config.is_reinforce:
        batch = collect_episode(state, env0, "behaviour")
        state.trace.append("collect")
        metrics = reinforce_update(state, batch, config)
    else:
        batch = collect_rollout(state, list(envs), "behaviour", config.num_steps)
        state.trace.append("collect")
        metrics = ppo_update(state, batch, config)
    state.trace.append("policy_update")
    metrics.update(ratio_stats(batch, config))
    metrics.update(auxiliary_steps(state, config, env0.action_kind))
    state.phase += 1
    return metrics


def plain_phase(state: TrainState, envs, config: PhaseConfig) -> dict:
    env0 = envs[0] if isinstance(envs, (list, tuple)) else envs
    if config.is_reinforce:
        batch = collect_episode(state, env0, "target")
        metrics = reinforce_update(state, batch, config)
    else:
        batch = collect_rollout(state, list(envs), "target", config.num_steps)
        metrics = ppo_update(state, batch, config)
    state.trace.extend(["collect", "policy_update"])
    state.phase += 1
    return metrics


def run_phase(state: TrainState, envs, config: PhaseConfig) -> dict:
    return (bpo_phase if config.is_bpo else plain_phase)(state, envs, config)


def evaluate(policy, env, n_episodes: int, rng: np.random.Generator):
    """Mean and standard error of undiscounted returns, sampling from ``policy``."""
    returns = []
    for _ in range(n_episodes):
        obs = env.observe(env.reset(rng))
        total = 0.0
        while True:
            action, _ = policy.sample(obs[None, :], rng)
            step = env.step(action[0], rng)
            total += step.reward
            if step.done or step.truncated:
                break
            obs = env.observe(step.next_state)
        returns.append(total)
    returns = np.asarray(returns)
    se = float(returns.std(ddof=1) / math.sqrt(len(returns))) if len(returns) > 1 else 0.0
    return float(returns.mean()), se


def train(config: PhaseConfig, env_factory: Callable, seed: int, eval_every: int = 1,
          callback: Optional[Callable] = None) -> list:
    """Run ``config.n_phases`` phases; returns one metrics row per evaluated phase.

    ``env_factory()`` builds a fresh environment; training streams, the eval
    environment and its generator are all separate.
    """
    envs = [env_factory() for _ in range(config.num_envs)]
    eval_env = env_factory()
    state = init_state(envs[0], config, seed)
    rows = []
    for phase in range(config.n_phases):
        metrics = run_phase(state, envs, config)
        if (phase + 1) % eval_every == 0 or phase == config.n_phases - 1:
            mean, se = evaluate(state.pi, eval_env, config.eval_episodes, state.streams.eval)
            row = {"phase": phase + 1, "env_steps": state.env_steps, "episodes": state.episodes,
                   "eval_mean": mean, "eval_se": se}
            row.update(metrics)
            rows.append(row)
            if callback is not None:
                callback(row)
    return rows
