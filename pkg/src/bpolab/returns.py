"""Off-policy return estimators: PDIS and truncated IS-weighted TD(lambda).

All array arguments are time-major: shape ``[T]`` or ``[T, B]`` where ``B``
indexes independent streams (parallel environments, or enumerated
trajectories in the oracle). ``ends[t]`` marks the last step of a segment
(terminal, horizon truncation, or end of the rollout); nothing propagates
backwards across an end. Bootstrapping is carried by ``next_values``: the
caller puts 0 there for terminal transitions and ``V(S_{t+1})`` otherwise.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class TruncationConfig:
    """Parameters of the truncated IS TD(lambda) return.

    ``traj=True`` truncates the accumulated product of ratios with ``c_bar``
    instead of truncating each ratio; ``rho_bar`` is then unused.
    """

    lam: float = 1.0
    c_bar: float = math.inf
    rho_bar: float = math.inf
    traj: bool = False

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.c_bar < 0 or self.rho_bar < 0:
            raise ValueError("truncation levels must be non-negative")
        if not (self.rho_bar >= self.c_bar >= 1.0):
            warnings.warn(
                f"rho_bar={self.rho_bar}, c_bar={self.c_bar}: rho_bar >= c_bar >= 1 is recommended",
                stacklevel=2,
            )


@dataclass
class RolloutBatch:
    """Time-major rollout from one collection phase.

    Arrays have leading shape ``[T, B]``. ``log_pi`` is the target policy's
    log-probability at collection time.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    truncs: np.ndarray
    log_mu: np.ndarray
    log_pi: np.ndarray

    def __post_init__(self):
        shape = self.rewards.shape
        for name in ("actions", "dones", "truncs", "log_mu", "log_pi"):
            arr = getattr(self, name)
            if arr.shape[:len(shape)] != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected leading {shape}")
        if self.obs.shape[:len(shape)] != shape or self.next_obs.shape[:len(shape)] != shape:
            raise ValueError("obs/next_obs leading shape mismatch")
        if not (np.all(np.isfinite(self.log_mu)) and np.all(np.isfinite(self.log_pi))):
            raise ValueError("log-probabilities must be finite")
        if np.any(self.dones & self.truncs):
            raise ValueError("a step cannot be both terminal and truncated")

    @property
    def n_steps(self) -> int:
        return int(self.rewards.size)

    @property
    def ends(self) -> np.ndarray:
        ends = self.dones | self.truncs
        ends = ends.copy()
        ends[-1] = True
        return ends

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        n = self.rewards.size
        return arr.reshape(n, *arr.shape[self.rewards.ndim:])


def _log_ratio(log_pi, log_mu) -> np.ndarray:
    log_pi = np.asarray(log_pi, dtype=float)
    log_mu = np.asarray(log_mu, dtype=float)
    both_zero = np.isneginf(log_pi) & np.isneginf(log_mu)
    if np.any(both_zero):
        idx = tuple(int(i) for i in np.argwhere(both_zero)[0])
        raise ValueError(f"0/0 importance ratio at step {idx}")
    with np.errstate(invalid="ignore", over="ignore"):
        diff = log_pi - log_mu
    bad = ~np.isfinite(diff) & ~np.isneginf(diff)
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"non-finite importance ratio at step {idx}")
    return diff


def raw_ratios(log_pi, log_mu) -> np.ndarray:
    with np.errstate(over="ignore"):
        ratio = np.exp(_log_ratio(log_pi, log_mu))
    if not np.all(np.isfinite(ratio)):
        idx = tuple(int(i) for i in np.argwhere(~np.isfinite(ratio))[0])
        raise ValueError(f"importance ratio overflows at step {idx}")
    return ratio


def is_ratios(log_pi, log_mu, config: TruncationConfig):
    """Truncated ratios ``(c_t, rho_t)`` from log-probabilities."""
    ratio = raw_ratios(log_pi, log_mu)
    return np.minimum(config.c_bar, ratio), np.minimum(config.rho_bar, ratio)


def pdis_returns(rewards, ratios, ends, gamma: float) -> np.ndarray:
    """Per-decision IS return ``G_t = rho_t (R_{t+1} + gamma G_{t+1})``."""
    rewards = np.asarray(rewards, dtype=float)
    ratios = np.asarray(ratios, dtype=float)
    ends = np.asarray(ends, dtype=bool)
    if not (rewards.shape == ratios.shape == ends.shape):
        raise ValueError("rewards, ratios and ends must have identical shapes")
    out = np.zeros_like(rewards)
    g = np.zeros_like(rewards[0])
    for t in range(rewards.shape[0] - 1, -1, -1):
        g = ratios[t] * (rewards[t] + gamma * np.where(ends[t], 0.0, g))
        out[t] = g
    return out


def _check_shapes(rewards, values, next_values, ends, log_pi, log_mu):
    arrs = [np.asarray(x) for x in (rewards, values, next_values, ends, log_pi, log_mu)]
    shape = arrs[0].shape
    for name, arr in zip(("values", "next_values", "ends", "log_pi", "log_mu"), arrs[1:]):
        if arr.shape != shape:
            raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")


def tis_td_lambda_returns(rewards, values, next_values, ends, log_pi, log_mu,
                          config: TruncationConfig, gamma: float) -> np.ndarray:
    """Truncated IS TD(lambda) returns by backward recursion.

    ``G_t = v_t + delta_t + gamma*lam*c_t*(G_{t+1} - v_{t+1})`` with
    ``delta_t = rho_t (R_{t+1} + gamma v_{t+1} - v_t)``. In trajectory mode the
    running product of raw ratios is capped at ``c_bar`` after every
    multiplication (cap-then-propagate), which costs O(L^2) per segment.
    """
    _check_shapes(rewards, values, next_values, ends, log_pi, log_mu)
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    next_values = np.asarray(next_values, dtype=float)
    ends = np.asarray(ends, dtype=bool)
    if config.traj:
        ratio = raw_ratios(log_pi, log_mu)
        td = rewards + gamma * next_values - values
        return values + _traj_corrections(td, ratio, ends, gamma * config.lam, config.c_bar)

    c, rho = is_ratios(log_pi, log_mu, config)
    delta = rho * (rewards + gamma * next_values - values)
    decay = gamma * config.lam
    out = np.empty_like(rewards)
    # y holds G_{t+1} - v(S_{t+1})
    y = np.zeros_like(rewards[0])
    for t in range(rewards.shape[0] - 1, -1, -1):
        y = delta[t] + decay * c[t] * np.where(ends[t], 0.0, y)
        out[t] = values[t] + y
    return out


def _traj_corrections(td, ratio, ends, decay, c_bar):
    """Backward pass for trajectory-level truncation.

    Keeps, for the current start time t, the capped weight of every later
    TD error k in the segment: ``W_{t,k} = min(c_bar, ratio_t * W_{t+1,k})``.
    """
    T = td.shape[0]
    out = np.empty_like(td)
    weights = np.zeros_like(td)
    alive = np.zeros(td.shape, dtype=bool)
    powers = decay ** np.arange(T).reshape(-1, *([1] * (td.ndim - 1)))
    for t in range(T - 1, -1, -1):
        # later steps only count if the segment continues past t
        alive[t + 1:] &= ~ends[t]
        weights[t + 1:] = np.minimum(c_bar, ratio[t] * weights[t + 1:])
        weights[t] = np.minimum(c_bar, ratio[t])
        alive[t] = True
        terms = powers[:T - t] * weights[t:] * td[t:]
        out[t] = np.sum(np.where(alive[t:], terms, 0.0), axis=0)
    return out


def tis_td_lambda_direct(rewards, values, next_values, ends, log_pi, log_mu,
                         config: TruncationConfig, gamma: float) -> np.ndarray:
    """Literal O(T^2) double sum of the truncated IS TD(lambda) return.

    Test oracle for :func:`tis_td_lambda_returns`; 1-D inputs only.
    """
    _check_shapes(rewards, values, next_values, ends, log_pi, log_mu)
    rewards = np.asarray(rewards, dtype=float)
    if rewards.ndim != 1:
        raise ValueError("tis_td_lambda_direct takes 1-D arrays")
    values = np.asarray(values, dtype=float)
    next_values = np.asarray(next_values, dtype=float)
    ends = np.asarray(ends, dtype=bool)
    ratio = raw_ratios(log_pi, log_mu)
    T = len(rewards)
    td = rewards + gamma * next_values - values
    out = np.empty(T)
    for t in range(T):
        end = t
        while not ends[end]:
            end += 1
        total = 0.0
        for k in range(t, end + 1):
            if config.traj:
                w = min(config.c_bar, ratio[k])
                for i in range(k - 1, t - 1, -1):
                    w = min(config.c_bar, ratio[i] * w)
            else:
                w = min(config.rho_bar, ratio[k])
                for i in range(t, k):
                    w *= min(config.c_bar, ratio[i])
            total += (gamma * config.lam) ** (k - t) * w * td[k]
        out[t] = values[t] + total
    return out


def advantages(returns, values) -> np.ndarray:
    returns = np.asarray(returns, dtype=float)
    values = np.asarray(values, dtype=float)
    if returns.shape != values.shape:
        raise ValueError(f"returns {returns.shape} and values {values.shape} differ in shape")
    return returns - values


def batch_returns(batch: RolloutBatch, values: np.ndarray, next_values: np.ndarray,
                  config: TruncationConfig, gamma: float,
                  log_pi: Optional[np.ndarray] = None) -> np.ndarray:
    """:func:`tis_td_lambda_returns` over a :class:`RolloutBatch`.

    ``next_values`` is zeroed on terminal steps here.
    """
    next_values = np.where(batch.dones, 0.0, next_values)
    lp = batch.log_pi if log_pi is None else log_pi
    return tis_td_lambda_returns(batch.rewards, values, next_values, batch.ends,
                                 lp, batch.log_mu, config, gamma)
