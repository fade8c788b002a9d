"""Acceptance gate: one PASS/FAIL line per criterion.

Criteria 8 and 9 train agents through the experiment harness and take
tens of minutes on one CPU.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from bpolab.agents import PhaseConfig, collect_rollout, init_state, ppo_update
from bpolab.approx.gradcheck import run_gradient_checks
from bpolab.fixtures import gaussian_fixture, tabular_fixture
from bpolab.harness import compare_dirs, gaussian_tail_demo, load_config, run_experiment
from bpolab.mdp import make_point_mass, make_random_tabular
from bpolab.oracle import (compute_q_hat, compute_tilde, enumerate_returns, oracle_bundle,
                           policy_evaluation, return_moments, variance_operator)
from bpolab.returns import TruncationConfig, tis_td_lambda_direct, tis_td_lambda_returns

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
INF = math.inf
GAMMA = 0.8
HORIZON = 14


@pytest.fixture
def report(capsys):
    def emit(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nCRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


def mdp_suite():
    """20 random MDPs with 2-4 states, 2-3 actions, gamma 0.8, and a random target policy each."""
    rng = np.random.default_rng(2024)
    for i in range(20):
        S, A = int(rng.integers(2, 5)), int(rng.integers(2, 4))
        mdp = make_random_tabular(S, A, GAMMA, seed=100 + i)
        yield mdp, rng.dirichlet(np.ones(A), size=S), rng


def covering_behaviours(rng, S, A, n=5):
    # Dirichlet draws are strictly positive, so they cover any target
    return [rng.dirichlet(np.ones(A), size=S) for _ in range(n)]


def value_tail(mdp, horizon=HORIZON):
    return mdp.discount**horizon * mdp.r_max / (1 - mdp.discount)


def second_moment_tail(mdp, horizon=HORIZON):
    g, R = mdp.discount, mdp.r_max
    gh = g**horizon
    return gh * R**2 * (2 - gh) / (1 - g) ** 2


def variance_tail(mdp, pi, mu, var_h, v):
    """Bound on |Var G - Var G_H| for the PDIS return sampled by mu.

    With tail T, E[T^2] = (K^H (J_mu + v^2))(s) where K is the mu-weighted
    gamma^2 rho^2 kernel, and |Var G - Var G_H| <= E[T^2] + 2 sqrt(Var G_H E[T^2]).
    """
    K, b = variance_operator(mdp, pi, mu, INF, INF)
    J = np.linalg.solve(np.eye(len(b)) - K, b)
    et2 = np.linalg.matrix_power(K, HORIZON) @ (J + v**2)
    return et2 + 2 * np.sqrt(np.maximum(var_h, 0) * et2)


def random_segment(rng, T, p_min):
    """Synthetic segment; action probabilities for pi and mu drawn from [p_min, 1]."""
    r = rng.normal(size=T)
    v = rng.normal(size=T)
    nv = np.append(v[1:], rng.normal())
    ends = rng.random(T) < 0.15
    ends[-1] = True
    nv = np.where(ends & (rng.random(T) < 0.5), 0.0, nv)
    lp = np.log(rng.uniform(p_min, 1.0, size=T))
    lm = np.log(rng.uniform(p_min, 1.0, size=T))
    return r, v, nv, ends, lp, lm


def identity_sweep(p_min, n=1000):
    """Max absolute and scale-relative gaps between recursion and direct sum."""
    rng = np.random.default_rng(1)
    worst_abs, worst_rel, scale = 0.0, 0.0, 0.0
    for trial in range(n):
        T = int(rng.integers(1, 65))
        c_bar = float(rng.choice([1.0, 1.5, INF]))
        rho_bar = max(c_bar, float(rng.choice([1.0, 1.5, 2.0, INF])))
        cfg = TruncationConfig(lam=float(rng.choice([0.0, 0.5, 0.95, 1.0])), c_bar=c_bar,
                               rho_bar=rho_bar, traj=bool(trial % 4 == 3))
        args = random_segment(rng, T, p_min)
        rec = tis_td_lambda_returns(*args, cfg, 0.97)
        direct = tis_td_lambda_direct(*args, cfg, 0.97)
        err = float(np.max(np.abs(rec - direct)))
        big = float(np.max(np.abs(direct)))
        worst_abs, scale = max(worst_abs, err), max(scale, big)
        worst_rel = max(worst_rel, err / max(1.0, big))
    return worst_abs, worst_rel, scale


def test_criterion_01_estimator_identity(report):
    worst, _, scale = identity_sweep(p_min=0.3)
    # diagnostic: ratios up to 20 untruncated push returns past 1e6, where
    # float64 spacing alone exceeds 1e-12
    wide_abs, wide_rel, wide_scale = identity_sweep(p_min=0.05)
    ok = worst <= 1e-12
    report(1, ok, f"max |recursive - direct| = {worst:.2e} over 1000 batches, |G| <= {scale:.0f} "
                  f"(tol 1e-12). Diagnostic, probabilities down to 0.05: abs {wide_abs:.1e} at "
                  f"|G| <= {wide_scale:.1e}, relative to scale {wide_rel:.1e}")
    assert ok


def test_criterion_02_unbiasedness(report):
    worst_excess, worst_err, checks = -INF, 0.0, 0
    for mdp, pi, rng in mdp_suite():
        v = policy_evaluation(mdp, pi)
        tail = value_tail(mdp)
        for mu in covering_behaviours(rng, *pi.shape):
            for lam in (0.0, 0.5, 1.0):
                cfg = TruncationConfig(lam=lam, c_bar=INF, rho_bar=INF)
                mean, _ = return_moments(mdp, mu, pi, HORIZON, cfg, v)
                err = float(np.max(np.abs(mean - v)))
                worst_err = max(worst_err, err)
                worst_excess = max(worst_excess, err - tail)
                checks += 1
    # independent route: brute-force leaves through the production estimator
    brute = 0.0
    for mdp, pi, rng in list(mdp_suite())[:4]:
        v = policy_evaluation(mdp, pi)
        mu = covering_behaviours(rng, *pi.shape, n=1)[0]
        for lam in (0.0, 0.5, 1.0):
            cfg = TruncationConfig(lam=lam, c_bar=INF, rho_bar=INF)
            d = enumerate_returns(mdp, mu, pi, 5, cfg, v)
            mean, _ = return_moments(mdp, mu, pi, 5, cfg, v)
            brute = max(brute, max(abs(d[s].mean - mean[s]) for s in d))
    ok = worst_excess <= 0 and brute <= 1e-10
    report(2, ok, f"{checks} (MDP, mu, lambda) cases: max |E G - v| = {worst_err:.2e} within tail bound; "
                  f"leaf enumeration vs moment recursion {brute:.1e}")
    assert ok


def test_criterion_03_variance_reduction(report):
    worst, order_ok, n_pos, long_gap = -INF, True, 0, 0.0
    pdis = TruncationConfig(lam=1.0, c_bar=INF, rho_bar=INF)
    diag = []
    for mdp, pi, _ in mdp_suite():
        b = oracle_bundle(mdp, pi)
        zeros = np.zeros(mdp.n_states)
        m_pi, s_pi = return_moments(mdp, pi, pi, HORIZON, pdis, zeros)
        m_mu, s_mu = return_moments(mdp, b.mu_hat, pi, HORIZON, pdis, zeros)
        var_pi, var_mu = s_pi - m_pi**2, s_mu - m_mu**2
        tol = 1e-6 + variance_tail(mdp, pi, pi, var_pi, b.v) + variance_tail(mdp, pi, b.mu_hat, var_mu, b.v)
        gap = np.abs(var_mu - (var_pi - b.epsilon))
        worst = max(worst, float(np.max(gap - tol)))
        # long horizon: truncation error negligible, so the ordering is checked directly
        m_pi, s_pi = return_moments(mdp, pi, pi, 400, pdis, zeros)
        m_mu, s_mu = return_moments(mdp, b.mu_hat, pi, 400, pdis, zeros)
        var_pi, var_mu = s_pi - m_pi**2, s_mu - m_mu**2
        long_gap = max(long_gap, float(np.max(np.abs(var_mu - (var_pi - b.epsilon)))))
        pos = b.epsilon > 1e-12
        n_pos += int(pos.sum())
        order_ok &= bool(np.all(var_mu[pos] <= var_pi[pos] + 1e-9))
        # diagnostic: the same comparison with the exact v_pi control variate
        m_cv, s_cv = return_moments(mdp, b.mu_hat, pi, 400, pdis, b.v)
        diag.append(float(np.max(np.abs((s_cv - m_cv**2) - b.j_mu_hat))))
    ok = worst <= 0 and long_gap <= 1e-6 and order_ok
    report(3, ok, f"PDIS form: max(|Var_mu_hat - (Var_pi - eps)| - tol) = {worst:.2e} at H=14, "
                  f"max gap {long_gap:.1e} at H=400 (tol 1e-6); "
                  f"Var_mu_hat <= Var_pi on all {n_pos} states with eps > 0 = {order_ok}. "
                  f"Diagnostic, v_pi control variate: max |Var - J_mu_hat| = {max(diag):.3f}")
    assert ok


def test_criterion_04_q_hat_oracle(report):
    worst, ident = -INF, 0.0
    for mdp, pi, _ in mdp_suite():
        _, q_hat = compute_q_hat(mdp, pi)
        _, q_tilde = compute_tilde(mdp, pi)
        v = policy_evaluation(mdp, pi)
        ident = max(ident, float(np.max(np.abs(q_hat - q_tilde - (v**2)[:, None]))))
        zeros = np.zeros(mdp.n_states)
        tail = second_moment_tail(mdp)
        for a in range(mdp.n_actions):
            _, second = return_moments(mdp, pi, pi, HORIZON, TruncationConfig(), zeros, first_action=a)
            worst = max(worst, float(np.max(np.abs(second - q_hat[:, a]) - tail)))
    ok = worst <= 0 and ident <= 1e-10
    report(4, ok, f"max(|q_hat - E[G^2|s,a]| - tail) = {worst:.2e}; "
                  f"max |q_hat - q_tilde - v^2| = {ident:.1e} (tol 1e-10)")
    assert ok


def test_criterion_05_on_policy_consistency(report):
    worst = -INF
    brute = 0.0
    for i, (mdp, pi, _) in enumerate(mdp_suite()):
        v = policy_evaluation(mdp, pi)
        tol = 1e-10 + value_tail(mdp)
        for lam in (0.0, 0.5, 1.0):
            cfg = TruncationConfig(lam=lam, c_bar=1.0, rho_bar=1.0)
            mean, _ = return_moments(mdp, pi, pi, HORIZON, cfg, v)
            worst = max(worst, float(np.max(np.abs(mean - v) - tol)))
        if i < 4:
            for traj in (False, True):
                cfg = TruncationConfig(lam=0.7, c_bar=1.0, rho_bar=1.0, traj=traj)
                d = enumerate_returns(mdp, pi, pi, 5, cfg, v)
                brute = max(brute, max(abs(d[s].mean - v[s]) for s in d))
    ok = worst <= 0 and brute <= 1e-10
    report(5, ok, f"mu = pi, c_bar = rho_bar = 1: max(|E G - v| - tol) = {worst:.2e}; "
                  f"leaf enumeration incl. traj mode {brute:.1e}")
    assert ok


@pytest.fixture(scope="module")
def tabular():
    return tabular_fixture()


def test_criterion_06_fqe_convergence(report, tabular):
    ok = tabular.q_error <= 0.1 and tabular.q_hat_error <= 0.1
    report(6, ok, f"sup |Q - q| = {tabular.q_error:.4f}, sup |Q_hat - q_hat| = {tabular.q_hat_error:.4f} "
                  f"(tol 0.1)")
    assert ok


def test_criterion_07_behaviour_matching(report, tabular):
    g = gaussian_fixture(k=2.0)
    ok = tabular.mu_tv <= 0.02 and abs(g.mu_mean - g.optimum_mean) <= 0.05
    report(7, ok, f"discrete TV(mu, mu_hat) = {tabular.mu_tv:.2e} (tol 0.02); continuous mean "
                  f"{g.mu_mean:.4f} vs optimum {g.optimum_mean:.1f} (tol 0.05)")
    assert ok


def test_criterion_08_short_corridor(report, tmp_path):
    t0 = time.time()
    dirs = {}
    for name in ("reinforce", "bpo_reinforce"):
        cfg = load_config(CONFIGS / f"shortcorridor_{name}.json")
        assert len(cfg.seeds) >= 30
        res = run_experiment(cfg, tmp_path / name)
        assert not res.errors
        dirs[name] = tmp_path / name
    cmp = compare_dirs(dirs["reinforce"], dirs["bpo_reinforce"])
    elapsed = time.time() - t0
    ok = cmp.b_mean >= -14.0 and cmp.no_worse and elapsed < 3600
    report(8, ok, f"BPO-REINFORCE {cmp.b_mean:.3f} +/- {cmp.b_se:.3f} vs REINFORCE "
                  f"{cmp.a_mean:.3f} +/- {cmp.a_se:.3f} over {cmp.n_b} seeds, 1000 episodes "
                  f"(need >= -14.0 and >= REINFORCE - 1 SE); {elapsed:.0f}s (need < 3600s)")
    assert ok


def reduction_identity_holds() -> bool:
    base = dict(num_steps=256, num_envs=2, n_epochs=3, batch_size=64, c_bar=1.0, rho_bar=1.0,
                lam=0.95, n_qvf_epochs=0, n_mu_epochs=0)
    envs_a = [make_point_mass(start_spread=1.0) for _ in range(2)]
    envs_b = [make_point_mass(start_spread=1.0) for _ in range(2)]
    a = init_state(envs_a[0], PhaseConfig(agent="ppo", **base), 123)
    b = init_state(envs_b[0], PhaseConfig(agent="bpo-ppo", **base), 123)
    batch_a = collect_rollout(a, envs_a, "target", 256)
    batch_b = collect_rollout(b, envs_b, "behaviour", 256)
    same_batch = all(np.array_equal(getattr(batch_a, k), getattr(batch_b, k))
                     for k in ("obs", "actions", "rewards", "log_mu", "log_pi"))
    ppo_update(a, batch_a, PhaseConfig(agent="ppo", **base))
    ppo_update(b, batch_b, PhaseConfig(agent="bpo-ppo", **base))
    same = all(np.array_equal(a.pi.params[k], b.pi.params[k]) for k in a.pi.params)
    same &= all(np.array_equal(a.v.params[k], b.v.params[k]) for k in a.v.params)
    return same_batch and same


def test_criterion_09_point_mass(report, tmp_path):
    t0 = time.time()
    identity = reduction_identity_holds()
    dirs = {}
    for name in ("ppo", "bpo_ppo"):
        cfg = load_config(CONFIGS / f"pointmass_{name}.json")
        res = run_experiment(cfg, tmp_path / name)
        assert not res.errors
        dirs[name] = tmp_path / name
    cmp = compare_dirs(dirs["ppo"], dirs["bpo_ppo"])
    ok = identity and cmp.no_worse
    report(9, ok, f"reduction identity bitwise = {identity}; BPO-PPO {cmp.b_mean:.3f} +/- {cmp.b_se:.3f} "
                  f"vs PPO {cmp.a_mean:.3f} +/- {cmp.a_se:.3f} over {cmp.n_b} paired seeds "
                  f"(need >= PPO - 1 SE); {time.time() - t0:.0f}s")
    assert ok


def test_criterion_10_gradient_checks(report):
    results, redraws = run_gradient_checks(n_configs=100, seed=0)
    worst = max(err for _, _, err in results)
    names = sorted({name for _, name, _ in results})
    ok = worst <= 1e-4
    report(10, ok, f"{len(results)} checks over 100 configurations and {len(names)} gradient kinds: "
                   f"max relative error {worst:.2e} (tol 1e-4); {redraws} non-smooth draws replaced")
    assert ok


def test_criterion_11_gaussian_tail(report):
    res = gaussian_tail_demo(n_samples=1000, proposal_std=2.0, seed=0, n_trials=10**5)
    mean, se = res.grand_mean()
    unbiased = abs(mean - 3.16712e-5) <= 3 * se
    ok = res.is_var < res.naive_var and unbiased
    report(11, ok, f"Var IS {res.is_var:.3e} < Var naive {res.naive_var:.3e}; IS grand mean "
                   f"{mean:.5e} +/- {se:.1e} vs erfc value {res.truth:.5e}")
    assert ok
