"""Environments: finite tabular MDPs, ShortCorridor and a 1-D point mass.

Environments are small mutable state machines. Every random draw comes from
the ``numpy.random.Generator`` handed to ``reset``/``step``; nothing touches
global RNG state, so a fixed seed replays the same trajectory.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

LEFT, RIGHT = 0, 1

_ATOL = 1e-12


@dataclass
class TabularMdp:
    """Finite MDP with deterministic rewards ``r(s, a)``.

    Attributes:
        transition: array ``[S, A, S]``, ``transition[s, a, s']`` = p(s'|s,a).
        reward: array ``[S, A]``.
        initial_dist: array ``[S]``.
        terminal: boolean array ``[S]``; terminal states self-loop with reward 0.
        discount: gamma in [0, 1).
    """

    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    terminal: np.ndarray
    discount: float

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.discount = float(self.discount)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.reward))) if self.reward.size else 0.0


def validate_mdp(mdp: TabularMdp) -> list[str]:
    """Return a list of violated invariants; an empty list means valid."""
    problems = []
    P, R = mdp.transition, mdp.reward
    if P.ndim != 3 or P.shape[0] != P.shape[2]:
        return [f"transition has shape {P.shape}, expected [S, A, S]"]
    S, A = P.shape[0], P.shape[1]
    if R.shape != (S, A):
        problems.append(f"reward has shape {R.shape}, expected {(S, A)}")
    if mdp.initial_dist.shape != (S,):
        problems.append(f"initial_dist has shape {mdp.initial_dist.shape}, expected {(S,)}")
    if mdp.terminal.shape != (S,):
        problems.append(f"terminal has shape {mdp.terminal.shape}, expected {(S,)}")
    if problems:
        return problems

    for s in range(S):
        for a in range(A):
            row = P[s, a]
            if np.any(row < 0):
                problems.append(f"transition[{s}][{a}] has negative entries")
            total = row.sum()
            if abs(total - 1.0) > _ATOL:
                problems.append(f"transition[{s}][{a}] sums to {total!r}, not 1")
    if not np.all(np.isfinite(R)):
        problems.append("reward has non-finite entries")
    if np.any(mdp.initial_dist < 0) or abs(mdp.initial_dist.sum() - 1.0) > _ATOL:
        problems.append(f"initial_dist sums to {mdp.initial_dist.sum()!r} or has negative entries")
    for s in np.flatnonzero(mdp.terminal):
        if not np.allclose(P[s, :, s], 1.0, atol=_ATOL):
            problems.append(f"terminal state {s} does not self-loop")
        if np.any(R[s] != 0.0):
            problems.append(f"terminal state {s} has non-zero reward")
    if not (0.0 <= mdp.discount < 1.0):
        problems.append(f"discount {mdp.discount!r} outside [0, 1)")
    return problems


@dataclass(frozen=True)
class EnvStep:
    next_state: object
    reward: float
    done: bool
    truncated: bool = False


class EpisodeFinishedError(RuntimeError):
    """Raised when ``step`` is called on a finished episode without ``reset``."""


@dataclass
class FeatureMap:
    """Fixed-dimension features ``x(s, a)`` stored as a table ``[S, A, d]``."""

    table: np.ndarray

    @property
    def dim(self) -> int:
        return self.table.shape[2]

    def __call__(self, state: int, action: int) -> np.ndarray:
        return self.table[state, action]

    def state_features(self, state: int) -> np.ndarray:
        """All per-action features of ``state``, flattened action-major."""
        return self.table[state].reshape(-1)


class TabularEnv:
    """Sampling wrapper around a :class:`TabularMdp`.

    Observations are ``features.state_features(s)`` when a feature map is
    given, otherwise a one-hot encoding of the state.
    """

    action_kind = "discrete"

    def __init__(self, mdp: TabularMdp, horizon: int = 1000,
                 features: Optional[FeatureMap] = None):
        problems = validate_mdp(mdp)
        if problems:
            raise ValueError("invalid MDP: " + "; ".join(problems))
        self.mdp = mdp
        self.horizon = int(horizon)
        self.features = features
        self.n_actions = mdp.n_actions
        self.obs_dim = (features.table.shape[1] * features.dim if features is not None
                        else mdp.n_states)
        self._cum_transition = np.cumsum(mdp.transition, axis=2)
        self._cum_initial = np.cumsum(mdp.initial_dist)
        self.state: Optional[int] = None
        self.t = 0
        self._finished = True

    def observe(self, state: int) -> np.ndarray:
        if self.features is not None:
            return self.features.state_features(state).astype(float)
        obs = np.zeros(self.mdp.n_states)
        obs[state] = 1.0
        return obs

    def reset(self, rng: np.random.Generator) -> int:
        self.state = _sample_cdf(self._cum_initial, rng)
        self.t = 0
        self._finished = bool(self.mdp.terminal[self.state])
        return self.state

    def step(self, action: int, rng: np.random.Generator) -> EnvStep:
        if self._finished:
            raise EpisodeFinishedError("step() called on a finished episode; call reset()")
        s, a = self.state, int(action)
        reward = float(self.mdp.reward[s, a])
        s_next = _sample_cdf(self._cum_transition[s, a], rng)
        self.t += 1
        done = bool(self.mdp.terminal[s_next])
        truncated = (not done) and self.t >= self.horizon
        self.state = s_next
        self._finished = done or truncated
        return EnvStep(s_next, reward, done, truncated)


def _sample_cdf(cdf: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def short_corridor_mdp(discount: float = 0.99) -> TabularMdp:
    """The 4-state corridor; state 1 swaps the effect of left and right."""
    S, A = 4, 2
    P = np.zeros((S, A, S))
    P[0, LEFT, 0] = 1.0
    P[0, RIGHT, 1] = 1.0
    P[1, LEFT, 2] = 1.0
    P[1, RIGHT, 0] = 1.0
    P[2, LEFT, 1] = 1.0
    P[2, RIGHT, 3] = 1.0
    P[3, :, 3] = 1.0
    R = -np.ones((S, A))
    R[3] = 0.0
    terminal = np.array([False, False, False, True])
    return TabularMdp(P, R, np.eye(S)[0], terminal, discount)


def short_corridor_features(n_states: int = 4) -> FeatureMap:
    table = np.zeros((n_states, 2, 2))
    table[:, LEFT] = [0.0, 1.0]
    table[:, RIGHT] = [1.0, 0.0]
    return FeatureMap(table)


def make_short_corridor(discount: float = 0.99, horizon: int = 1000):
    """Return ``(env, features)`` for ShortCorridor.

    Every state shares the same features, so the agent cannot tell states
    apart. Episodes are cut at ``horizon`` steps.
    """
    features = short_corridor_features()
    env = TabularEnv(short_corridor_mdp(discount), horizon=horizon, features=features)
    return env, features


def make_random_tabular(n_states: int, n_actions: int, discount: float, seed: int) -> TabularMdp:
    """Random dense MDP: positive normalized transition rows, rewards in [-1, 1]."""
    if n_states < 2 or n_actions < 2:
        raise ValueError(f"need n_states >= 2 and n_actions >= 2, got {n_states}, {n_actions}")
    if not (0.0 <= discount < 1.0):
        raise ValueError(f"discount must lie in [0, 1), got {discount}")
    rng = np.random.default_rng(seed)
    raw = rng.gamma(1.0, size=(n_states, n_actions, n_states)) + 0.05
    P = raw / raw.sum(axis=2, keepdims=True)
    R = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    init = rng.gamma(1.0, size=n_states) + 0.05
    init = init / init.sum()
    return TabularMdp(P, R, init, np.zeros(n_states, dtype=bool), discount)


@dataclass
class PointMassEnv:
    """1-D point mass; state ``(position, velocity)``, scalar force action.

    The action is clipped to [-1, 1]. Reward is ``-(x**2 + 0.1 * a**2)``
    with ``x`` the position before the step.
    """

    horizon: int = 200
    noise_scale: float = 0.0
    dt: float = 0.1
    start: tuple = (0.0, 0.0)
    start_spread: float = 0.0
    action_kind: str = field(default="continuous", init=False)
    action_dim: int = field(default=1, init=False)
    obs_dim: int = field(default=2, init=False)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")
        self.state = None
        self.t = 0
        self._finished = True

    def observe(self, state) -> np.ndarray:
        return np.asarray(state, dtype=float)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        state = np.array(self.start, dtype=float)
        if self.start_spread > 0:
            state[0] += rng.uniform(-self.start_spread, self.start_spread)
        self.state = state
        self.t = 0
        self._finished = False
        return state.copy()

    def step(self, action, rng: np.random.Generator) -> EnvStep:
        if self._finished:
            raise EpisodeFinishedError("step() called on a finished episode; call reset()")
        a = float(np.clip(np.asarray(action, dtype=float).reshape(-1)[0], -1.0, 1.0))
        x, v = self.state
        reward = -(x * x + 0.1 * a * a)
        v = v + self.dt * a
        x = x + self.dt * v
        if self.noise_scale > 0:
            x += self.noise_scale * rng.standard_normal()
            v += self.noise_scale * rng.standard_normal()
        self.state = np.array([x, v])
        self.t += 1
        truncated = self.t >= self.horizon
        self._finished = truncated
        return EnvStep(self.state.copy(), reward, False, truncated)


def make_point_mass(horizon: int = 200, noise_scale: float = 0.0, **kwargs) -> PointMassEnv:
    return PointMassEnv(horizon=horizon, noise_scale=noise_scale, **kwargs)
