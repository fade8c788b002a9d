"""Stochastic policies and Q heads built on :class:`ParamNet`."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .nets import ParamNet, symexp, symexp_grad

LOG_2PI = math.log(2.0 * math.pi)


def _logsoftmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class CategoricalPolicy:
    """Softmax policy over ``n_actions``.

    ``mode="mlp"`` maps observations to logits with a :class:`ParamNet`.
    ``mode="action_features"`` expects observations that concatenate the
    per-action feature vectors ``x(s, a)`` (each of length ``feat_dim``) and
    uses ``logit(a) = w . x(s, a)`` with no bias.
    """

    kind = "discrete"

    def __init__(self, obs_dim: int, n_actions: int, mode: str = "mlp", hidden=(64, 64),
                 layer_norm: bool = False, zero_init: bool = True, seed: Optional[int] = 0,
                 net: Optional[ParamNet] = None, params: Optional[dict] = None):
        self.obs_dim, self.n_actions, self.mode = obs_dim, n_actions, mode
        self.seed = seed
        if mode == "mlp":
            self.net = net if net is not None else ParamNet(obs_dim, n_actions, hidden, layer_norm,
                                                           zero_init, seed=seed)
            self.params = self.net.params
        elif mode == "action_features":
            if obs_dim % n_actions:
                raise ValueError("obs_dim must be n_actions * feat_dim in action_features mode")
            self.feat_dim = obs_dim // n_actions
            self.net = None
            self.params = params if params is not None else {"w": np.zeros(self.feat_dim)}
        else:
            raise ValueError(f"unknown policy mode {mode!r}")

    def clone(self) -> "CategoricalPolicy":
        if self.mode == "mlp":
            return CategoricalPolicy(self.obs_dim, self.n_actions, "mlp", net=self.net.clone(),
                                     seed=self.seed)
        return CategoricalPolicy(self.obs_dim, self.n_actions, "action_features", seed=self.seed,
                                 params={k: v.copy() for k, v in self.params.items()})

    def _logits(self, obs):
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if obs.shape[1] != self.obs_dim:
            raise ValueError(f"expected observations of width {self.obs_dim}, got {obs.shape}")
        if self.mode == "mlp":
            return self.net.forward(obs)
        feats = obs.reshape(len(obs), self.n_actions, self.feat_dim)
        return feats @ self.params["w"], {"feats": feats}

    def log_probs(self, obs) -> np.ndarray:
        """``log pi(.|s)``, shape ``[N, A]``."""
        return _logsoftmax(self._logits(obs)[0])

    def probs(self, obs) -> np.ndarray:
        return np.exp(self.log_probs(obs))

    def log_prob_entropy(self, obs, actions):
        logits, net_cache = self._logits(obs)
        logp_all = _logsoftmax(logits)
        p = np.exp(logp_all)
        actions = np.asarray(actions, dtype=int).reshape(-1)
        logp = logp_all[np.arange(len(actions)), actions]
        ent = -np.sum(p * logp_all, axis=1)
        cache = {"net": net_cache, "p": p, "logp_all": logp_all, "actions": actions, "ent": ent}
        return logp, ent, cache

    def log_prob(self, obs, actions) -> np.ndarray:
        return self.log_prob_entropy(obs, actions)[0]

    def backward_logits(self, cache, dlogits):
        if self.mode == "mlp":
            return self.net.backward(cache["net"], dlogits)[0]
        return {"w": np.einsum("na,naf->f", dlogits, cache["net"]["feats"])}

    def backward(self, cache, dlogp, dent=None):
        """Gradients of ``sum(dlogp * logp + dent * entropy)``."""
        p, actions = cache["p"], cache["actions"]
        onehot = np.zeros_like(p)
        onehot[np.arange(len(actions)), actions] = 1.0
        dlogits = np.asarray(dlogp, dtype=float)[:, None] * (onehot - p)
        if dent is not None:
            dent = np.asarray(dent, dtype=float) * np.ones(len(p))
            dlogits = dlogits - dent[:, None] * p * (cache["logp_all"] + cache["ent"][:, None])
        return self.backward_logits(cache, dlogits)

    def sample(self, obs, rng: np.random.Generator):
        logp_all = self.log_probs(obs)
        cdf = np.cumsum(np.exp(logp_all), axis=1)
        u = rng.random(len(cdf)) * cdf[:, -1]
        actions = np.minimum((cdf <= u[:, None]).sum(axis=1), self.n_actions - 1)
        return actions, logp_all[np.arange(len(actions)), actions]


class GaussianPolicy:
    """Diagonal Gaussian with MLP mean and a learned state-independent log std."""

    kind = "continuous"

    def __init__(self, obs_dim: int, action_dim: int, hidden=(64, 64), layer_norm: bool = False,
                 zero_init: bool = True, init_log_std: float = -1.0, seed: Optional[int] = 0,
                 net: Optional[ParamNet] = None):
        self.obs_dim, self.action_dim, self.seed = obs_dim, action_dim, seed
        self.net = net if net is not None else ParamNet(obs_dim, action_dim, hidden, layer_norm,
                                                       zero_init, seed=seed)
        if "log_std" not in self.net.params:
            self.net.params["log_std"] = np.full(action_dim, float(init_log_std))
        self.params = self.net.params

    def clone(self) -> "GaussianPolicy":
        return GaussianPolicy(self.obs_dim, self.action_dim, net=self.net.clone(), seed=self.seed)

    def mean_std(self, obs):
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        mean, cache = self.net.forward(obs)
        return mean, np.exp(self.params["log_std"]), cache

    def log_prob_entropy(self, obs, actions):
        mean, std, net_cache = self.mean_std(obs)
        actions = np.asarray(actions, dtype=float).reshape(mean.shape)
        z = (actions - mean) / std
        log_std = self.params["log_std"]
        logp = np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=1)
        ent = np.full(len(mean), np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))
        cache = {"net": net_cache, "z": z, "std": std}
        return logp, ent, cache

    def log_prob(self, obs, actions) -> np.ndarray:
        return self.log_prob_entropy(obs, actions)[0]

    def backward_dist(self, cache, dmean, dlog_std):
        """Gradients given upstream ``d/dmean [N, k]`` and ``d/dlog_std [N, k]``."""
        grads, _ = self.net.backward(cache["net"], dmean)
        grads["log_std"] = np.asarray(dlog_std, dtype=float).sum(axis=0)
        return grads

    def backward(self, cache, dlogp, dent=None):
        z, std = cache["z"], cache["std"]
        dlogp = np.asarray(dlogp, dtype=float)[:, None]
        dmean = dlogp * z / std
        dls = dlogp * (z * z - 1.0)
        if dent is not None:
            dls = dls + np.asarray(dent, dtype=float).reshape(-1, 1) * np.ones_like(z)
        return self.backward_dist(cache, dmean, dls)

    def sample(self, obs, rng: np.random.Generator):
        mean, std, _ = self.mean_std(obs)
        actions = mean + std * rng.standard_normal(mean.shape)
        z = (actions - mean) / std
        logp = np.sum(-0.5 * z * z - self.params["log_std"] - 0.5 * LOG_2PI, axis=1)
        return actions, logp


class QNet:
    """Action-value head.

    Discrete: one output per action from the observation. Continuous: a
    single output from ``[obs, action]``. ``kind`` is ``"q"`` (clip range
    symmetric) or ``"qhat"`` (clip range ``[0, bound]``, predictions floored
    at 0).
    """

    def __init__(self, obs_dim: int, n_actions: int = 0, action_dim: int = 0, hidden=(64, 64),
                 layer_norm: bool = False, zero_init: bool = True, symlog_head: bool = True,
                 kind: str = "q", seed: Optional[int] = 0, net: Optional[ParamNet] = None):
        if (n_actions > 0) == (action_dim > 0):
            raise ValueError("give exactly one of n_actions (discrete) or action_dim (continuous)")
        if kind not in ("q", "qhat"):
            raise ValueError(f"unknown Q kind {kind!r}")
        self.obs_dim, self.n_actions, self.action_dim, self.kind = obs_dim, n_actions, action_dim, kind
        self.discrete = n_actions > 0
        head = "symlog" if symlog_head else "linear"
        if net is None:
            in_dim = obs_dim if self.discrete else obs_dim + action_dim
            out_dim = n_actions if self.discrete else 1
            net = ParamNet(in_dim, out_dim, hidden, layer_norm, zero_init, head, seed=seed)
        self.net = net
        self.params = net.params

    def clone(self) -> "QNet":
        return QNet(self.obs_dim, self.n_actions, self.action_dim, kind=self.kind,
                    net=self.net.clone())

    @property
    def symlog_head(self) -> bool:
        return self.net.head == "symlog"

    def _input(self, obs, actions):
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if self.discrete:
            return obs
        actions = np.asarray(actions, dtype=float).reshape(len(obs), self.action_dim)
        return np.concatenate([obs, actions], axis=1)

    def raw_all(self, obs):
        """Raw outputs for every action ``[N, A]`` (discrete only)."""
        if not self.discrete:
            raise ValueError("raw_all needs a discrete Q head")
        return self.net(np.atleast_2d(np.asarray(obs, dtype=float)))

    def raw(self, obs, actions):
        """Raw output at ``(s, a)``, shape ``[N]``, plus a cache."""
        out, cache = self.net.forward(self._input(obs, actions))
        if self.discrete:
            actions = np.asarray(actions, dtype=int).reshape(-1)
            return out[np.arange(len(actions)), actions], (cache, actions, out.shape)
        return out[:, 0], (cache, None, out.shape)

    def backward(self, cache, draw):
        """Gradients of ``sum(draw * raw)``; returns ``(grads, d_input)``."""
        net_cache, actions, shape = cache
        dout = np.zeros(shape)
        if self.discrete:
            dout[np.arange(len(actions)), actions] = draw
        else:
            dout[:, 0] = draw
        return self.net.backward(net_cache, dout)

    def to_value(self, raw):
        value = symexp(raw) if self.symlog_head else np.asarray(raw, dtype=float)
        if self.kind == "qhat":
            value = np.maximum(value, 0.0)
        return value

    def clip(self, value, bound: Optional[float]):
        if bound is None:
            return value
        return np.clip(value, 0.0 if self.kind == "qhat" else -bound, bound)

    def predict(self, obs, actions, clip_bound: Optional[float] = None):
        return self.clip(self.to_value(self.raw(obs, actions)[0]), clip_bound)

    def predict_all(self, obs, clip_bound: Optional[float] = None):
        return self.clip(self.to_value(self.raw_all(obs)), clip_bound)

    def value_and_action_grad(self, obs, actions):
        """Unclipped prediction and its gradient w.r.t. the action (continuous)."""
        if self.discrete:
            raise ValueError("action gradients need a continuous Q head")
        raw, cache = self.raw(obs, actions)
        _, dinput = self.backward(cache, np.ones_like(raw))
        scale = symexp_grad(raw) if self.symlog_head else np.ones_like(raw)
        return self.to_value(raw), dinput[:, self.obs_dim:] * scale[:, None]
