"""Central finite-difference checks for every hand-written gradient.

Each case builds a small random instance and returns a scalar loss closure
together with the analytic gradient of that loss. ``run_gradient_checks``
sweeps all cases over many random configurations.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nets import ParamNet
from .policies import CategoricalPolicy, GaussianPolicy, QNet

FD_STEP = 1e-5


@dataclass
class GradCase:
    name: str
    params: dict
    loss: Callable[[], float]
    analytic: dict


def numeric_grad(loss: Callable[[], float], params: dict, h: float = FD_STEP) -> dict:
    """Central differences, perturbing ``params`` in place (restored after)."""
    out = {}
    for k in sorted(params):
        p = params[k]
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = loss()
            p[i] = old - h
            down = loss()
            p[i] = old
            g[i] = (up - down) / (2 * h)
        out[k] = g
    return out


def relative_error(analytic: dict, numeric: dict) -> float:
    keys = sorted(numeric)
    a = np.concatenate([np.asarray(analytic.get(k, np.zeros_like(numeric[k]))).ravel() for k in keys])
    n = np.concatenate([numeric[k].ravel() for k in keys])
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / scale)


def _hidden(rng):
    return tuple(int(h) for h in rng.integers(2, 7, size=int(rng.integers(0, 3))))


def _randomize(params: dict, rng, scale=0.7):
    for k, v in params.items():
        v[...] = rng.normal(scale=scale, size=v.shape)


def _net_case(rng):
    d_in, d_out, n = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(2, 6))
    hidden = _hidden(rng)
    ln = bool(rng.integers(2)) and all(h > 1 for h in hidden)
    net = ParamNet(d_in, d_out, hidden, layer_norm=ln, zero_init=False, seed=int(rng.integers(1 << 30)))
    _randomize(net.params, rng)
    X = rng.normal(size=(n, d_in))
    dout = rng.normal(size=(n, d_out))
    grads, dX = net.backward(net.forward(X)[1], dout)

    def loss():
        return float(np.sum(dout * net(X)))

    cases = [GradCase(f"paramnet(ln={ln})", net.params, loss, grads)]
    holder = {"X": X}

    def loss_x():
        return float(np.sum(dout * net(holder["X"])))

    cases.append(GradCase("paramnet_input", holder, loss_x, {"X": dX}))
    return cases


def _categorical_case(rng):
    A, n = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    if rng.integers(2):
        feat = int(rng.integers(1, 4))
        pi = CategoricalPolicy(A * feat, A, "action_features")
        _randomize(pi.params, rng)
        name = "categorical_features"
    else:
        obs_dim = int(rng.integers(1, 5))
        pi = CategoricalPolicy(obs_dim, A, "mlp", hidden=_hidden(rng), zero_init=False,
                               seed=int(rng.integers(1 << 30)))
        _randomize(pi.params, rng)
        name = "categorical_mlp"
    obs = rng.normal(size=(n, pi.obs_dim))
    actions = rng.integers(0, A, size=n)
    cl, ce = rng.normal(size=n), rng.normal(size=n)
    _, _, cache = pi.log_prob_entropy(obs, actions)
    grads = pi.backward(cache, cl, ce)

    def loss():
        logp, ent, _ = pi.log_prob_entropy(obs, actions)
        return float(np.sum(cl * logp + ce * ent))

    return [GradCase(name, pi.params, loss, grads)]


def _gaussian_case(rng):
    obs_dim, k, n = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(2, 6))
    pi = GaussianPolicy(obs_dim, k, hidden=_hidden(rng), zero_init=False,
                        seed=int(rng.integers(1 << 30)))
    _randomize(pi.params, rng, 0.5)
    obs = rng.normal(size=(n, obs_dim))
    actions = rng.normal(size=(n, k))
    cl, ce = rng.normal(size=n), rng.normal(size=n)
    _, _, cache = pi.log_prob_entropy(obs, actions)
    grads = pi.backward(cache, cl, ce)

    def loss():
        logp, ent, _ = pi.log_prob_entropy(obs, actions)
        return float(np.sum(cl * logp + ce * ent))

    return [GradCase("gaussian", pi.params, loss, grads)]


def _random_qnet(rng, obs_dim, discrete, kind="q"):
    A = int(rng.integers(2, 4))
    q = QNet(obs_dim, n_actions=A if discrete else 0, action_dim=0 if discrete else int(rng.integers(1, 3)),
             hidden=_hidden(rng), zero_init=False, symlog_head=bool(rng.integers(2)), kind=kind,
             seed=int(rng.integers(1 << 30)))
    _randomize(q.params, rng, 0.5)
    return q


def _qnet_actions(rng, q, n):
    if q.discrete:
        return rng.integers(0, q.n_actions, size=n)
    return rng.normal(size=(n, q.action_dim))


def _qnet_case(rng):
    obs_dim, n = int(rng.integers(1, 4)), int(rng.integers(2, 6))
    cases = []
    for discrete in (True, False):
        q = _random_qnet(rng, obs_dim, discrete)
        obs = rng.normal(size=(n, obs_dim))
        actions = _qnet_actions(rng, q, n)
        w = rng.normal(size=n)
        raw, cache = q.raw(obs, actions)
        grads, _ = q.backward(cache, w)

        def loss(q=q, obs=obs, actions=actions, w=w):
            return float(np.sum(w * q.raw(obs, actions)[0]))

        cases.append(GradCase(f"qnet(discrete={discrete})", q.params, loss, grads))
    q = _random_qnet(rng, obs_dim, False)
    obs = rng.normal(size=(n, obs_dim))
    holder = {"a": _qnet_actions(rng, q, n)}
    w = rng.normal(size=n)
    _, da = q.value_and_action_grad(obs, holder["a"])

    def loss_a():
        return float(np.sum(w * q.to_value(q.raw(obs, holder["a"])[0])))

    cases.append(GradCase("qnet_action", holder, loss_a, {"a": da * w[:, None]}))
    return cases


def _fqe_case(rng):
    from ..fqe import FqeHead, fqe_loss_grads

    obs_dim, n = int(rng.integers(1, 4)), int(rng.integers(2, 6))
    q = _random_qnet(rng, obs_dim, bool(rng.integers(2)))
    head = FqeHead.create(q, lr=1e-3, tau=0.02)
    _randomize(head.target.params, rng, 0.5)
    obs = rng.normal(size=(n, obs_dim))
    actions = _qnet_actions(rng, q, n)
    targets = rng.normal(scale=3.0, size=n)
    weights = rng.uniform(0.2, 2.0, size=n)
    reg = float(rng.uniform(0, 2))
    _, grads = fqe_loss_grads(head, obs, actions, targets, weights, reg)

    def loss():
        return fqe_loss_grads(head, obs, actions, targets, weights, reg)[0]

    return [GradCase("fqe_loss", q.params, loss, grads)]


def _behaviour_case(rng):
    from ..behaviour import BehaviourConfig, continuous_mu_grads, cross_entropy_grads

    cases = []
    A, n = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    obs_dim = int(rng.integers(1, 4))
    mu = CategoricalPolicy(obs_dim, A, "mlp", hidden=_hidden(rng), zero_init=False,
                           seed=int(rng.integers(1 << 30)))
    _randomize(mu.params, rng)
    obs = rng.normal(size=(n, obs_dim))
    target = rng.dirichlet(np.ones(A), size=n)
    _, grads = cross_entropy_grads(mu, obs, target)
    cases.append(GradCase("behaviour_ce", mu.params, lambda: cross_entropy_grads(mu, obs, target)[0],
                          grads))

    k = int(rng.integers(1, 3))
    mu_c = GaussianPolicy(obs_dim, k, hidden=_hidden(rng), zero_init=False, seed=int(rng.integers(1 << 30)))
    pi_c = GaussianPolicy(obs_dim, k, hidden=_hidden(rng), zero_init=False, seed=int(rng.integers(1 << 30)))
    _randomize(mu_c.params, rng, 0.4)
    _randomize(pi_c.params, rng, 0.4)
    qhat = QNet(obs_dim, action_dim=k, hidden=_hidden(rng), zero_init=False, kind="qhat",
                seed=int(rng.integers(1 << 30)))
    _randomize(qhat.params, rng, 0.4)
    # keep q_hat positive so the log is smooth
    L = len(qhat.net.hidden)
    qhat.params[f"b{L}"][...] = 2.0
    actions = rng.normal(size=(n, k))
    for mode in ("pathwise", "fixed"):
        cfg = BehaviourConfig(mode=mode)
        seed = int(rng.integers(1 << 30))

        def loss(cfg=cfg, seed=seed):
            return continuous_mu_grads(mu_c, pi_c, qhat, obs, actions, cfg, np.random.default_rng(seed))[0]

        _, grads = continuous_mu_grads(mu_c, pi_c, qhat, obs, actions, cfg, np.random.default_rng(seed))
        cases.append(GradCase(f"behaviour_{mode}", mu_c.params, loss, grads))
    return cases


def _ppo_case(rng):
    from ..agents import PhaseConfig, ppo_loss_grads

    n, obs_dim = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    if rng.integers(2):
        A = int(rng.integers(2, 4))
        pi = CategoricalPolicy(obs_dim, A, "mlp", hidden=_hidden(rng), zero_init=False,
                               seed=int(rng.integers(1 << 30)))
        actions = rng.integers(0, A, size=n)
    else:
        pi = GaussianPolicy(obs_dim, 1, hidden=_hidden(rng), zero_init=False,
                            seed=int(rng.integers(1 << 30)))
        actions = rng.normal(size=(n, 1))
    _randomize(pi.params, rng, 0.5)
    v = ParamNet(obs_dim, 1, _hidden(rng), zero_init=False, seed=int(rng.integers(1 << 30)))
    _randomize(v.params, rng, 0.5)
    obs = rng.normal(size=(n, obs_dim))
    log_mu = pi.log_prob(obs, actions) + rng.normal(scale=0.3, size=n)
    adv, returns = rng.normal(size=n), rng.normal(size=n)
    cfg = PhaseConfig(agent="ppo", beta_ent=float(rng.uniform(0, 0.1)), beta_value=float(rng.uniform(0.1, 1)))
    _, pg, vg = ppo_loss_grads(pi, v, obs, actions, log_mu, adv, returns, cfg)

    def loss():
        return ppo_loss_grads(pi, v, obs, actions, log_mu, adv, returns, cfg)[0]["loss"]

    return [GradCase("ppo_policy", pi.params, loss, pg), GradCase("ppo_value", v.params, loss, vg)]


CASE_BUILDERS = (_net_case, _categorical_case, _gaussian_case, _qnet_case, _fqe_case,
                 _behaviour_case, _ppo_case)


def stencil_is_smooth(case: GradCase, h: float = FD_STEP, tol: float = 1e-6):
    """Whether finite differences can check this case at all.

    Requires FD estimates at ``h`` and ``h/10`` to agree (no ReLU kink in
    the stencil) and the FD gradient to sit well above round-off
    (``~eps * |f| / h``). Independent of the analytic gradient. Returns
    ``(ok, numeric_grad_at_h)``.
    """
    coarse = numeric_grad(case.loss, case.params, h)
    fine = numeric_grad(case.loss, case.params, h / 10)
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in coarse.values()))
    resolution = 1e3 * np.finfo(float).eps * max(1.0, abs(case.loss())) / h
    return relative_error(fine, coarse) <= tol and norm > resolution, coarse


def run_gradient_checks(n_configs: int = 100, seed: int = 0, h: float = FD_STEP,
                        max_redraws: int = 50):
    """Check every case family over ``n_configs`` random configurations.

    A configuration whose finite-difference stencil is not smooth is
    redrawn. Returns ``(results, redraws)`` with results
    ``[(config, case name, relative error)]``.
    """
    rng = np.random.default_rng(seed)
    results, redraws = [], 0
    for i in range(n_configs):
        for build in CASE_BUILDERS:
            for _ in range(max_redraws):
                checked = [(case, *stencil_is_smooth(case, h)) for case in build(rng)]
                if all(ok for _, ok, _ in checked):
                    break
                redraws += 1
            else:
                raise RuntimeError(f"{build.__name__}: no smooth configuration in {max_redraws} draws")
            for case, _, num in checked:
                results.append((i, case.name, relative_error(case.analytic, num)))
    return results, redraws
