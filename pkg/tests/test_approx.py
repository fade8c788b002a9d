import math

import numpy as np
import pytest

from bpolab.approx import (CategoricalPolicy, GaussianPolicy, OptimizerState, ParamNet, PolyakState,
                           QNet, load_params, polyak_update, save_params, symexp, symlog)
from bpolab.approx.gradcheck import (GradCase, numeric_grad, relative_error, run_gradient_checks,
                                     stencil_is_smooth)


def test_symlog_fixed_points():
    assert symlog(0.0) == 0.0
    assert symlog(math.e - 1) == pytest.approx(1.0, abs=1e-15)
    assert symexp(1.0) == pytest.approx(math.e - 1, abs=1e-15)


def test_symlog_round_trip_and_oddness():
    x = np.random.default_rng(0).uniform(-1e6, 1e6, size=10**4)
    back = symexp(symlog(x))
    assert np.max(np.abs(back - x) / np.maximum(np.abs(x), 1e-300)) <= 1e-9
    np.testing.assert_array_equal(symlog(-x), -symlog(x))
    np.testing.assert_array_equal(symexp(-x[:100] / 1e5), -symexp(x[:100] / 1e5))


def test_gradients_small_sweep():
    results, _ = run_gradient_checks(n_configs=10, seed=1)
    worst = max(err for _, _, err in results)
    assert worst <= 1e-4
    names = {name for _, name, _ in results}
    for expected in ("paramnet(ln=True)", "gaussian", "fqe_loss", "behaviour_ce",
                     "behaviour_pathwise", "ppo_policy", "qnet_action"):
        assert expected in names


def test_gradient_check_catches_a_wrong_gradient():
    p = {"x": np.array([0.3, -1.2])}
    case = GradCase("square", p, lambda: float(np.sum(p["x"] ** 2)), {"x": 3 * p["x"]})
    smooth, num = stencil_is_smooth(case)
    assert smooth
    assert relative_error(case.analytic, num) > 0.1
    assert relative_error({"x": 2 * p["x"]}, num) < 1e-9


def test_stencil_guard_flags_kink_and_flat_loss():
    p = {"x": np.array([1e-6])}
    case = GradCase("relu", p, lambda: float(np.maximum(p["x"], 0.0).sum()), {"x": np.ones(1)})
    smooth, _ = stencil_is_smooth(case)
    assert not smooth
    flat = GradCase("flat", p, lambda: 1.0 + 1e-14 * float(p["x"][0]), {"x": np.zeros(1)})
    assert not stencil_is_smooth(flat)[0]


def test_numeric_grad_restores_params():
    p = {"w": np.array([[1.0, 2.0], [3.0, 4.0]])}
    before = p["w"].copy()
    numeric_grad(lambda: float(np.sum(np.sin(p["w"]))), p)
    np.testing.assert_array_equal(p["w"], before)


def test_zero_weights_give_uniform_policy():
    pi = CategoricalPolicy(4, 2, "action_features")
    np.testing.assert_array_equal(pi.probs(np.ones((3, 4))), 0.5)
    pi = CategoricalPolicy(3, 2, "mlp")
    np.testing.assert_allclose(pi.probs(np.random.default_rng(0).normal(size=(5, 3))), 0.5)


def test_action_feature_logits():
    pi = CategoricalPolicy(4, 2, "action_features")
    pi.params["w"][:] = [math.log(3.0), 0.0]
    # x(s, left) = [0, 1], x(s, right) = [1, 0]
    probs = pi.probs(np.array([[0.0, 1.0, 1.0, 0.0]]))
    np.testing.assert_allclose(probs, [[0.25, 0.75]], atol=1e-15)


def test_gaussian_log_prob_at_mean():
    pi = GaussianPolicy(2, 3)
    obs = np.zeros((1, 2))
    mean, std, _ = pi.mean_std(obs)
    np.testing.assert_allclose(std, math.exp(-1.0))
    lp = pi.log_prob(obs, mean)
    assert lp[0] == pytest.approx(3 * (-0.5 * math.log(2 * math.pi) + 1.0), abs=1e-12)


def test_sampling_is_seeded():
    pi = GaussianPolicy(2, 1)
    a1, _ = pi.sample(np.zeros((4, 2)), np.random.default_rng(5))
    a2, _ = pi.sample(np.zeros((4, 2)), np.random.default_rng(5))
    np.testing.assert_array_equal(a1, a2)
    cat = CategoricalPolicy(2, 3, "mlp", zero_init=False)
    acts = cat.sample(np.zeros((20000, 2)), np.random.default_rng(0))[0]
    freq = np.bincount(acts, minlength=3) / len(acts)
    p = cat.probs(np.zeros((1, 2)))[0]
    assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / len(acts)))


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        ParamNet(3, 1).forward(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        CategoricalPolicy(3, 2, "action_features")


def test_zero_init_predicts_zero_and_symexp_of_one():
    q = QNet(3, n_actions=2)
    np.testing.assert_array_equal(q.predict_all(np.ones((4, 3))), 0.0)
    L = len(q.net.hidden)
    q.params[f"b{L}"][:] = 1.0
    np.testing.assert_allclose(q.predict_all(np.ones((1, 3))), math.e - 1, atol=1e-15)


def test_clip_ranges():
    bound = 1.0 / (1 - 0.99)
    q = QNet(1, n_actions=1, hidden=())
    qh = QNet(1, n_actions=1, hidden=(), kind="qhat")
    for head in (q, qh):
        head.params["b0"][:] = 10.0
    assert q.predict_all(np.zeros((1, 1)), bound)[0, 0] == pytest.approx(100.0)
    assert qh.predict_all(np.zeros((1, 1)), bound)[0, 0] == pytest.approx(100.0)
    for head in (q, qh):
        head.params["b0"][:] = -10.0
    assert q.predict_all(np.zeros((1, 1)), bound)[0, 0] == pytest.approx(-100.0)
    assert qh.predict_all(np.zeros((1, 1)), bound)[0, 0] == 0.0


def test_layer_norm_statistics():
    net = ParamNet(3, 1, (8,), layer_norm=True, seed=1)
    _, cache = net.forward(np.random.default_rng(0).normal(size=(50, 3)) * 10)
    zhat = cache["zhat0"]
    assert np.max(np.abs(zhat.mean(axis=1))) <= 1e-10
    assert np.max(np.abs(zhat.var(axis=1) - 1)) <= 1e-6


def test_zero_init_output_layer():
    net = ParamNet(3, 2, (4, 4), zero_init=True)
    np.testing.assert_array_equal(net.params["W2"], 0.0)
    assert np.any(net.params["W0"] != 0)


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    opt = OptimizerState(p, lr=0.1)
    opt.step({"w": np.array([1.0, 1.0])})
    after_one = p["w"].copy()
    m = opt.m["w"].copy()
    opt.step({"w": np.zeros(2)})
    # the bias-corrected first moment is nonzero so a step still happens; raw
    # moments decay by beta1
    np.testing.assert_allclose(opt.m["w"], 0.9 * m)
    fresh = {"w": np.array([1.0, -2.0])}
    OptimizerState(fresh, lr=0.1).step({"w": np.zeros(2)})
    np.testing.assert_array_equal(fresh["w"], [1.0, -2.0])
    assert not np.array_equal(after_one, [1.0, -2.0])


def test_adam_clips_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    p1 = {"a": np.zeros(1), "b": np.zeros(1)}
    p2 = {"a": np.zeros(1), "b": np.zeros(1)}
    o1 = OptimizerState(p1, lr=1.0, eps=0.0, max_grad=0.5)
    o2 = OptimizerState(p2, lr=1.0, eps=0.0, max_grad=None)
    assert o1.step(g) == pytest.approx(5.0)
    o2.step({k: 0.1 * v for k, v in g.items()})
    np.testing.assert_allclose(o1.m["a"], o2.m["a"])
    np.testing.assert_allclose(o1.m["a"], 0.1 * 0.1 * 3.0)


def test_adam_rejects_bad_gradients():
    opt = OptimizerState({"w": np.zeros(2)})
    with pytest.raises(FloatingPointError):
        opt.step({"w": np.array([np.nan, 0.0])})
    with pytest.raises(ValueError):
        opt.step({"w": np.zeros(3)})


def test_adam_is_deterministic():
    def run():
        net = ParamNet(2, 1, (4,), zero_init=False, seed=3)
        opt = OptimizerState(net.params, lr=1e-2)
        rng = np.random.default_rng(0)
        for _ in range(20):
            X = rng.normal(size=(8, 2))
            out, cache = net.forward(X)
            grads, _ = net.backward(cache, out - 1.0)
            opt.step(grads)
        return net.params

    a, b = run(), run()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_polyak():
    src = {"w": np.ones(3)}
    full = PolyakState({"w": np.zeros(3)}, tau=1.0)
    polyak_update(full, src)
    np.testing.assert_array_equal(full.shadow["w"], 1.0)
    slow = PolyakState({"w": np.zeros(3)}, tau=0.02)
    polyak_update(slow, src)
    np.testing.assert_allclose(slow.shadow["w"], 0.02)
    for _ in range(99):
        polyak_update(slow, src)
    np.testing.assert_allclose(slow.shadow["w"], 1 - 0.98**100, rtol=1e-12)
    with pytest.raises(ValueError):
        PolyakState({"w": np.zeros(1)}, tau=0.0)


def test_param_archive_round_trip(tmp_path):
    net = ParamNet(3, 2, (5,), layer_norm=True, zero_init=False, seed=4)
    path = tmp_path / "net.npz"
    save_params(path, net.params)
    loaded = load_params(path)
    assert sorted(loaded) == sorted(net.params)
    for k, v in net.params.items():
        assert loaded[k].dtype == v.dtype and loaded[k].shape == v.shape
        np.testing.assert_array_equal(loaded[k], v)
