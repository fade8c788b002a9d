"""Exact ground truth on tabular MDPs.

Dynamic-programming solutions for v, q, the next-state value variance nu,
the second-moment action value q_hat (and its reward r_hat), the centred
variant q_tilde, the one-step variance-optimal behaviour policy, the
variance Bellman fixed point J and the variance gap epsilon. Two
trajectory-level checks complement them: brute-force enumeration of every
trajectory (small horizons) and an exact moment recursion over the same
trajectory distribution (any horizon).

Policies are plain arrays ``[S, A]`` whose rows are distributions.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .mdp import TabularMdp, validate_mdp
from .returns import TruncationConfig, tis_td_lambda_returns

FIXED_POINT_TOL = 1e-12
MAX_ITERATIONS = 10**6
DIRECT_SOLVE_LIMIT = 10**4
QHAT_NEGATIVE_TOL = 1e-9


class ConvergenceError(RuntimeError):
    pass


class CoverageError(ValueError):
    pass


def check_policy(policy: np.ndarray, mdp: Optional[TabularMdp] = None) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.ndim != 2:
        raise ValueError(f"policy must be [S, A], got shape {policy.shape}")
    if mdp is not None and policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {policy.shape} does not match MDP "
                         f"{(mdp.n_states, mdp.n_actions)}")
    if np.any(policy < 0) or np.any(np.abs(policy.sum(axis=1) - 1.0) > 1e-12):
        raise ValueError("policy rows must be distributions")
    return policy


def _check_mdp(mdp: TabularMdp):
    problems = validate_mdp(mdp)
    if problems:
        raise ValueError("invalid MDP: " + "; ".join(problems))


def iterate_fixed_point(K: np.ndarray, b: np.ndarray, tol: float = FIXED_POINT_TOL,
                        max_iter: int = MAX_ITERATIONS, history: bool = False):
    """Iterate ``x <- K x + b`` from zero until the sup-norm step is <= tol.

    With ``history=True`` also returns the list of successive step sizes.
    """
    x = np.zeros_like(b)
    steps = []
    for _ in range(max_iter):
        x_new = K @ x + b
        step = float(np.max(np.abs(x_new - x))) if x.size else 0.0
        steps.append(step)
        x = x_new
        if step <= tol * max(1.0, float(np.max(np.abs(x)))):
            return (x, steps) if history else x
    raise ConvergenceError(f"fixed-point iteration stalled after {max_iter} steps; "
                           f"last residual {steps[-1]:.3e}")


def solve_fixed_point(K: np.ndarray, b: np.ndarray, tol: float = FIXED_POINT_TOL) -> np.ndarray:
    """Unique fixed point of the affine map ``x -> K x + b``.

    Requires spectral radius of K below one. Small systems use a direct
    solve plus one refinement step; large ones fall back to iteration.
    """
    n = b.shape[0]
    if n == 0:
        return b.copy()
    if n > DIRECT_SOLVE_LIMIT:
        return iterate_fixed_point(K, b, tol)
    radius = float(np.max(np.abs(np.linalg.eigvals(K))))
    if radius >= 1.0:
        raise ConvergenceError(f"operator has spectral radius {radius:.6f} >= 1; no finite fixed point")
    A = np.eye(n) - K
    x = np.linalg.solve(A, b)
    x = x + np.linalg.solve(A, b - A @ x)
    residual = float(np.max(np.abs(K @ x + b - x)))
    if residual > tol * max(1.0, float(np.max(np.abs(x)))):
        return iterate_fixed_point(K, b, tol)
    return x


def _state_transition(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    return np.einsum("sa,sat->st", pi, mdp.transition)


def _sa_transition(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """``P[(s,a), (s',a')] = p(s'|s,a) pi(a'|s')``."""
    S, A = pi.shape
    return np.einsum("sat,tb->satb", mdp.transition, pi).reshape(S * A, S * A)


def policy_evaluation(mdp: TabularMdp, pi: np.ndarray, discount: Optional[float] = None) -> np.ndarray:
    """State values of ``pi``.

    ``discount=1.0`` is allowed for episodic MDPs: the system is solved on
    the non-terminal states and terminal values are 0.
    """
    _check_mdp(mdp)
    pi = check_policy(pi, mdp)
    gamma = mdp.discount if discount is None else float(discount)
    P = _state_transition(mdp, pi)
    r = np.sum(pi * mdp.reward, axis=1)
    if gamma < 1.0:
        return solve_fixed_point(gamma * P, r)
    live = ~mdp.terminal
    if not np.any(mdp.terminal):
        raise ValueError("undiscounted evaluation needs terminal states")
    v = np.zeros(mdp.n_states)
    try:
        v[live] = solve_fixed_point(P[np.ix_(live, live)], r[live])
    except ConvergenceError as exc:
        raise ConvergenceError(f"policy does not reach a terminal state: {exc}") from exc
    return v


def q_from_v(mdp: TabularMdp, v: np.ndarray, discount: Optional[float] = None) -> np.ndarray:
    gamma = mdp.discount if discount is None else discount
    return mdp.reward + gamma * mdp.transition @ v


def nu_pi(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    """Variance of ``gamma * v(S')`` under ``p(.|s, a)``."""
    gamma = mdp.discount
    mean = mdp.transition @ v
    second = mdp.transition @ (v * v)
    return np.maximum(gamma**2 * (second - mean**2), 0.0)


def compute_q_hat(mdp: TabularMdp, pi: np.ndarray):
    """``r_hat = 2 r q - r^2`` and the gamma^2-discounted fixed point q_hat."""
    _check_mdp(mdp)
    pi = check_policy(pi, mdp)
    v = policy_evaluation(mdp, pi)
    q = q_from_v(mdp, v)
    r_hat = 2.0 * mdp.reward * q - mdp.reward**2
    S, A = pi.shape
    K = mdp.discount**2 * _sa_transition(mdp, pi)
    q_hat = solve_fixed_point(K, r_hat.reshape(-1)).reshape(S, A)
    return r_hat, q_hat


def compute_tilde(mdp: TabularMdp, pi: np.ndarray):
    """``r_tilde = nu + q^2 - v^2`` and its gamma^2-discounted fixed point."""
    _check_mdp(mdp)
    pi = check_policy(pi, mdp)
    v = policy_evaluation(mdp, pi)
    q = q_from_v(mdp, v)
    nu = nu_pi(mdp, v)
    r_tilde = nu + q**2 - (v**2)[:, None]
    S, A = pi.shape
    K = mdp.discount**2 * _sa_transition(mdp, pi)
    q_tilde = solve_fixed_point(K, r_tilde.reshape(-1)).reshape(S, A)
    return r_tilde, q_tilde


def _floor_q_hat(q_hat: np.ndarray) -> np.ndarray:
    q_hat = np.asarray(q_hat, dtype=float)
    worst = float(np.min(q_hat)) if q_hat.size else 0.0
    if worst < -QHAT_NEGATIVE_TOL:
        s, a = np.unravel_index(np.argmin(q_hat), q_hat.shape)
        raise ValueError(f"q_hat[{s}, {a}] = {worst:.3e} is negative; it is a second moment")
    return np.maximum(q_hat, 0.0)


def optimal_behaviour_policy(pi: np.ndarray, q_hat: np.ndarray) -> np.ndarray:
    """``mu(a|s) ∝ pi(a|s) sqrt(q_hat(s, a))``; rows with zero mass fall back to pi."""
    pi = check_policy(pi)
    weights = pi * np.sqrt(_floor_q_hat(q_hat))
    norm = weights.sum(axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, weights / safe, pi)


def _ratio_table(pi: np.ndarray, mu: np.ndarray, q: Optional[np.ndarray] = None) -> np.ndarray:
    """pi/mu with 0 where mu is 0; checks the support condition."""
    uncovered = (mu == 0) & (pi > 0)
    if q is not None:
        uncovered &= q != 0
    if np.any(uncovered):
        s, a = np.argwhere(uncovered)[0]
        raise CoverageError(f"behaviour policy gives zero mass to (s={s}, a={a}) "
                            f"where pi(a|s) q(s,a) != 0")
    safe = np.where(mu > 0, mu, 1.0)
    return np.where(mu > 0, pi / safe, 0.0)


def variance_operator(mdp: TabularMdp, pi: np.ndarray, mu: np.ndarray,
                      c_bar: float = math.inf, rho_bar: float = math.inf):
    """Matrix ``K`` and offset ``b`` of the variance Bellman operator for mu."""
    v = policy_evaluation(mdp, pi)
    q = q_from_v(mdp, v)
    nu = nu_pi(mdp, v)
    ratio = _ratio_table(pi, mu, q)
    c = np.minimum(c_bar, ratio)
    rho = np.minimum(rho_bar, ratio)
    K = mdp.discount**2 * np.einsum("sa,sat->st", mu * c**2, mdp.transition)
    b = np.sum(mu * rho**2 * (nu + q**2), axis=1) - v**2
    return K, b


def variance_fixed_point(mdp: TabularMdp, pi: np.ndarray, mu: np.ndarray,
                         c_bar: float = math.inf, rho_bar: float = math.inf) -> np.ndarray:
    """Per-state variance ``J_mu`` of the lambda=1 return under mu."""
    _check_mdp(mdp)
    pi = check_policy(pi, mdp)
    mu = check_policy(mu, mdp)
    K, b = variance_operator(mdp, pi, mu, c_bar, rho_bar)
    return solve_fixed_point(K, b)


def epsilon_recursion(mdp: TabularMdp, pi: np.ndarray, mu_hat: np.ndarray, q_hat: np.ndarray):
    """Per-state Jensen gap ``c(s)`` and the propagated variance gap ``eps(s)``.

    ``eps(s) = c(s) + gamma^2 E_{a~mu_hat}[rho^2 E_{s'}[eps(s')]]``.
    """
    pi = check_policy(pi, mdp)
    mu_hat = check_policy(mu_hat, mdp)
    q_hat = _floor_q_hat(q_hat)
    c_gap = np.sum(pi * q_hat, axis=1) - np.sum(pi * np.sqrt(q_hat), axis=1) ** 2
    c_gap = np.maximum(c_gap, 0.0)
    ratio = _ratio_table(pi, mu_hat)
    K = mdp.discount**2 * np.einsum("sa,sat->st", mu_hat * ratio**2, mdp.transition)
    eps = solve_fixed_point(K, c_gap)
    return c_gap, eps


@dataclass
class ReturnDistribution:
    """Exact distribution of a return estimator from one start state."""

    probs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        total = float(np.sum(self.probs))
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"probabilities sum to {total!r}")

    @property
    def mean(self) -> float:
        return float(np.dot(self.probs, self.values))

    @property
    def second_moment(self) -> float:
        return float(np.dot(self.probs, self.values**2))

    @property
    def variance(self) -> float:
        m = self.mean
        return float(np.dot(self.probs, (self.values - m) ** 2))


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def enumerate_returns(mdp: TabularMdp, mu: np.ndarray, pi: np.ndarray, horizon: int,
                      config: TruncationConfig, values: np.ndarray,
                      start_states=None, first_action: Optional[int] = None,
                      max_leaves: int = 10**7) -> dict:
    """Enumerate every trajectory of length <= horizon sampled by mu.

    Each trajectory's return is computed by :func:`tis_td_lambda_returns`,
    the same code the agents use. Reaching the horizon is a truncation that
    bootstraps with ``values``; terminal states bootstrap with 0. With
    ``first_action`` the first action is fixed (probability 1) and the
    returned distribution is conditional on it.

    Returns a dict mapping start state to :class:`ReturnDistribution`.
    """
    _check_mdp(mdp)
    mu = check_policy(mu, mdp)
    pi = check_policy(pi, mdp)
    values = np.asarray(values, dtype=float)
    if start_states is None:
        start_states = range(mdp.n_states)
    log_mu_tab, log_pi_tab = _log(mu), _log(pi)
    branching = (mu > 0).sum(axis=1).max() * (mdp.transition > 0).sum(axis=2).max()
    if branching ** horizon > max_leaves:
        raise ValueError(f"enumeration would need up to {branching}^{horizon} leaves "
                         f"(> {max_leaves}); use a smaller instance or return_moments")
    out = {}
    for s0 in start_states:
        out[int(s0)] = _enumerate_from(mdp, mu, log_mu_tab, log_pi_tab, horizon, config,
                                       values, int(s0), first_action)
    return out


def _enumerate_from(mdp, mu, log_mu_tab, log_pi_tab, horizon, config, values, s0, first_action):
    P, R, term = mdp.transition, mdp.reward, mdp.terminal
    state = np.array([s0])
    logp = np.zeros(1)
    finished = np.array([bool(term[s0])])
    cols = {k: [] for k in ("r", "lmu", "lpi", "v", "nv", "end")}
    for t in range(horizon):
        new_state, new_logp, new_fin, parent, act = [], [], [], [], []
        for i, s in enumerate(state):
            if finished[i]:
                parent.append(i); act.append(-1); new_state.append(s)
                new_logp.append(logp[i]); new_fin.append(True)
                continue
            if t == 0 and first_action is not None:
                actions = [first_action]
            else:
                actions = np.flatnonzero(mu[s] > 0)
            for a in actions:
                la = 0.0 if (t == 0 and first_action is not None) else np.log(mu[s, a])
                for s2 in np.flatnonzero(P[s, a] > 0):
                    parent.append(i); act.append(a); new_state.append(s2)
                    new_logp.append(logp[i] + la + np.log(P[s, a, s2]))
                    new_fin.append(bool(term[s2]))
        parent = np.array(parent)
        act = np.array(act)
        prev_state = state[parent]
        new_state = np.array(new_state)
        new_fin = np.array(new_fin)
        pad = act < 0
        a_safe = np.where(pad, 0, act)
        for k in cols:
            cols[k] = [col[parent] for col in cols[k]]
        cols["r"].append(np.where(pad, 0.0, R[prev_state, a_safe]))
        cols["lmu"].append(np.where(pad, 0.0, log_mu_tab[prev_state, a_safe]))
        cols["lpi"].append(np.where(pad, 0.0, log_pi_tab[prev_state, a_safe]))
        cols["v"].append(np.where(pad, 0.0, values[prev_state]))
        cols["nv"].append(np.where(pad | term[new_state], 0.0, values[new_state]))
        cols["end"].append(pad | new_fin | (t == horizon - 1))
        state, logp, finished = new_state, np.array(new_logp), new_fin
    if horizon == 0 or not cols["r"]:
        return ReturnDistribution(np.ones(1), np.array([values[s0] if not term[s0] else 0.0]))
    arr = {k: np.stack(v) for k, v in cols.items()}
    G = tis_td_lambda_returns(arr["r"], arr["v"], arr["nv"], arr["end"], arr["lpi"],
                              arr["lmu"], config, mdp.discount)
    return ReturnDistribution(np.exp(logp), G[0])


def return_moments(mdp: TabularMdp, mu: np.ndarray, pi: np.ndarray, horizon: int,
                   config: TruncationConfig, values: np.ndarray,
                   first_action: Optional[int] = None):
    """Exact mean and second moment of the per-step-truncated return.

    Same trajectory distribution and boundary handling as
    :func:`enumerate_returns`, computed by a backward moment recursion on
    ``Y_t = G_t - v(S_t) = delta_t + gamma*lam*c_t*Y_{t+1}`` instead of
    listing trajectories. Returns arrays ``(mean[S], second[S])``.
    """
    if config.traj:
        raise ValueError("trajectory-level truncation is path dependent; use enumerate_returns")
    _check_mdp(mdp)
    mu = check_policy(mu, mdp)
    pi = check_policy(pi, mdp)
    v = np.asarray(values, dtype=float)
    gamma, term = mdp.discount, mdp.terminal
    S, A = mu.shape
    safe_mu = np.where(mu > 0, mu, 1.0)
    ratio = np.where(mu > 0, pi / safe_mu, 0.0)
    c = np.minimum(config.c_bar, ratio)
    rho = np.minimum(config.rho_bar, ratio)
    nv = np.where(term, 0.0, v)
    # delta[s, a, s']
    delta = rho[:, :, None] * (mdp.reward[:, :, None] + gamma * nv[None, None, :] - v[:, None, None])
    m1 = np.zeros(S)
    m2 = np.zeros(S)
    cont = (~term).astype(float)
    for n in range(1, horizon + 1):
        k = gamma * config.lam * c[:, :, None] * (cont[None, None, :] if n > 1 else 0.0)
        y1 = delta + k * m1[None, None, :]
        y2 = delta**2 + 2 * delta * k * m1[None, None, :] + k**2 * m2[None, None, :]
        if n == horizon and first_action is not None:
            weight = np.zeros((S, A))
            weight[:, first_action] = 1.0
        else:
            weight = mu
        e1 = np.einsum("sa,sat,sat->s", weight, mdp.transition, y1)
        e2 = np.einsum("sa,sat,sat->s", weight, mdp.transition, y2)
        m1 = np.where(term, 0.0, e1)
        m2 = np.where(term, 0.0, e2)
    v0 = np.where(term, 0.0, v)
    mean = v0 + m1
    second = v0**2 + 2 * v0 * m1 + m2
    return mean, second


def q_hat_finite_horizon(mdp: TabularMdp, pi: np.ndarray, horizon: int) -> np.ndarray:
    """``E_pi[G_{0:H}^2 | s, a]`` for the H-step return via the r_hat recursion."""
    pi = check_policy(pi, mdp)
    gamma = mdp.discount
    S, A = pi.shape
    q = np.zeros((S, A))
    q_hat = np.zeros((S, A))
    for _ in range(horizon):
        v_next = np.sum(pi * q, axis=1)
        qh_next = np.sum(pi * q_hat, axis=1)
        q_new = mdp.reward + gamma * mdp.transition @ v_next
        r_hat = 2 * mdp.reward * q_new - mdp.reward**2
        q_hat = r_hat + gamma**2 * mdp.transition @ qh_next
        q = q_new
    return q_hat


@dataclass
class OracleBundle:
    v: np.ndarray
    q: np.ndarray
    nu: np.ndarray
    r_hat: np.ndarray
    q_hat: np.ndarray
    r_tilde: np.ndarray
    q_tilde: np.ndarray
    j_pi: np.ndarray
    mu_hat: np.ndarray
    c_gap: np.ndarray
    epsilon: np.ndarray
    j_mu_hat: np.ndarray

    def rows(self):
        """One dict per (state, action)."""
        S, A = self.q.shape
        per_state = ("v", "j_pi", "c_gap", "epsilon", "j_mu_hat")
        per_sa = ("q", "nu", "r_hat", "q_hat", "r_tilde", "q_tilde", "mu_hat")
        for s in range(S):
            for a in range(A):
                row = {"state": s, "action": a}
                row.update({k: float(getattr(self, k)[s, a]) for k in per_sa})
                row.update({k: float(getattr(self, k)[s]) for k in per_state})
                yield row

    def to_csv(self, path) -> None:
        rows = list(self.rows())
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


BUNDLE_FIELDS = tuple(f.name for f in fields(OracleBundle))


def oracle_bundle(mdp: TabularMdp, pi: np.ndarray) -> OracleBundle:
    """Every oracle quantity for ``(mdp, pi)``."""
    _check_mdp(mdp)
    pi = check_policy(pi, mdp)
    v = policy_evaluation(mdp, pi)
    q = q_from_v(mdp, v)
    nu = nu_pi(mdp, v)
    r_hat, q_hat = compute_q_hat(mdp, pi)
    r_tilde, q_tilde = compute_tilde(mdp, pi)
    j_pi = variance_fixed_point(mdp, pi, pi)
    mu_hat = optimal_behaviour_policy(pi, q_hat)
    c_gap, eps = epsilon_recursion(mdp, pi, mu_hat, q_hat)
    j_mu_hat = variance_fixed_point(mdp, pi, mu_hat)
    return OracleBundle(v, q, nu, r_hat, q_hat, r_tilde, q_tilde, j_pi, mu_hat, c_gap, eps, j_mu_hat)
