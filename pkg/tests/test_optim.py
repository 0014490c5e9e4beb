import math

import numpy as np
import pytest

from depthlab.numerics import RngStream
from depthlab.optim import (
    OptState,
    Schedule,
    momentum_step,
    optimizer_step,
    schedule_value,
    sgd_step,
    velocity,
    weight_decay_step,
)
from depthlab.parameterization import MUP_SQRTL, SP, ParamConfig, effective_lr
from depthlab.resnet import DivergenceError, forward, init_network, loss_and_grads


def tiny(scheme=SP, act="tanh", **kw):
    cfg = ParamConfig(N=6, L=2, D=3, act=act, scheme=scheme, **kw)
    return init_network(cfg, RngStream(11))


def batch(P=4, D=3):
    rng = np.random.default_rng(5)
    return rng.normal(size=(P, D)), rng.normal(size=P)


def params_equal(a, b):
    return all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_schedule_values():
    s = Schedule("linear_warmup", 0.1, 1000)
    assert schedule_value(s, 0) == 0.0
    assert schedule_value(s, 1000) == 0.1
    assert schedule_value(s, 500) == pytest.approx(0.05)
    c = Schedule("warmup_cosine", 0.2, 100, 300)
    assert schedule_value(c, 200) == pytest.approx(0.1, rel=1e-14)
    assert schedule_value(c, 100) == pytest.approx(0.2)
    assert schedule_value(c, 400) == 0.0
    assert schedule_value(Schedule("constant", 0.3), 10 ** 6) == 0.3
    with pytest.raises(ValueError):
        schedule_value(s, -1)
    with pytest.raises(ValueError):
        Schedule("warmup_cosine", 0.1, 10, 5)


def test_zero_grads_leave_net_unchanged():
    net = tiny()
    before = net.copy()
    grads = {k: np.zeros_like(net.params[k]) for k in net.trainable_names()}
    sgd_step(net, grads, Schedule("constant", 0.5), 0)
    assert params_equal(net, before)


def test_sgd_hand_arithmetic():
    net = tiny(scheme=MUP_SQRTL, gamma0=0.5)
    w0 = net.params["readout"].copy()
    g = np.arange(6.0)
    sgd_step(net, {"readout": g}, Schedule("constant", 0.1), 0)
    lr = 0.1 * 0.25 * 6
    assert np.array_equal(net.params["readout"], w0 - lr * g)


def test_two_half_steps_on_linear_in_theta_loss():
    # only the read-out trains: the output is linear in it, so the gradient of a
    # linear functional of f is constant and two half steps equal one full step
    net = tiny(train_readin=False)
    g = {"readout": np.linspace(-1, 1, 6)}
    a, b = net.copy(), net.copy()
    sgd_step(a, g, Schedule("constant", 0.2), 0)
    sgd_step(b, g, Schedule("constant", 0.1), 0)
    sgd_step(b, g, Schedule("constant", 0.1), 1)
    assert np.allclose(a.params["readout"], b.params["readout"], rtol=0, atol=1e-15)


def test_two_half_steps_differ_on_nonlinear_loss():
    net = tiny()
    X, y = batch()
    full, half = net.copy(), net.copy()
    sgd_step(full, loss_and_grads(full, X, y)[2], Schedule("constant", 0.4), 0)
    for t in range(2):
        sgd_step(half, loss_and_grads(half, X, y)[2], Schedule("constant", 0.2), t)
    assert not params_equal(full, half)


@pytest.mark.parametrize("lowrank", [False, True])
def test_momentum_zero_alpha_is_bitwise_sgd(lowrank):
    net = tiny(scheme=MUP_SQRTL)
    X, y = batch()
    grads = loss_and_grads(net, X, y, lowrank=lowrank)[2]
    a, b = net.copy(), net.copy()
    sgd_step(a, grads, Schedule("constant", 0.3), 0)
    momentum_step(b, grads, OptState(alpha=0.0), Schedule("constant", 0.3), 0)
    assert params_equal(a, b)


def test_momentum_unfolds_to_geometric_sum():
    net = tiny(scheme=MUP_SQRTL, gamma0=0.7)
    rng = np.random.default_rng(0)
    alpha = 0.8
    state = OptState(alpha=alpha)
    seq = []
    for t in range(7):
        g = rng.normal(size=6)
        seq.append(g)
        momentum_step(net, {"readout": g}, state, Schedule("constant", 0.01), t)
    c = -net.cfg.N * net.cfg.gamma0
    want = (1 - alpha) * sum(alpha ** (6 - s) * c * seq[s] for s in range(7))
    assert np.allclose(velocity(net, state, "readout"), want, rtol=1e-13, atol=0)


def test_momentum_constant_gradient_fixed_point():
    net = tiny()
    state = OptState(alpha=0.9)
    g = np.full(6, 0.25)
    for t in range(600):
        momentum_step(net, {"readout": g}, state, Schedule("constant", 1e-6), t)
    assert np.allclose(velocity(net, state, "readout"), -net.cfg.N * net.cfg.gamma0 * g, rtol=1e-12)


def test_momentum_position_update_convention():
    # theta(t+1) = theta(t) + eta0 gamma0 v(t) with v = -N gamma0 u
    net = tiny(scheme=MUP_SQRTL, gamma0=0.5)
    state = OptState(alpha=0.5)
    for t in range(3):
        w0 = net.params["readout"].copy()
        momentum_step(net, {"readout": np.full(6, t + 1.0)}, state, Schedule("constant", 0.2), t)
        step = 0.2 * net.cfg.gamma0 * velocity(net, state, "readout")
        assert np.allclose(net.params["readout"] - w0, step, rtol=1e-13)


def test_lowrank_momentum_matches_dense():
    cfg = ParamConfig(N=8, L=3, D=3, act="relu")
    X, y = batch()
    a = init_network(cfg, RngStream(2))
    b = a.copy()
    sa, sb = OptState(alpha=0.6), OptState(alpha=0.6)
    s = Schedule("constant", 0.05)
    for t in range(3):
        momentum_step(a, loss_and_grads(a, X, y)[2], sa, s, t)
        momentum_step(b, loss_and_grads(b, X, y, lowrank=True)[2], sb, s, t)
    for k in a.params:
        assert np.allclose(a.params[k], b.params[k], rtol=1e-12, atol=1e-14)


def test_weight_decay_zero_lambda_is_sgd():
    net = tiny()
    X, y = batch()
    grads = loss_and_grads(net, X, y)[2]
    a, b = net.copy(), net.copy()
    sgd_step(a, grads, Schedule("constant", 0.1), 0)
    weight_decay_step(b, grads, OptState(weight_decay=0.0), Schedule("constant", 0.1), 0)
    assert params_equal(a, b)


def test_weight_decay_geometric_shrink():
    net = tiny()
    w0 = {k: net.params[k].copy() for k in net.params}
    zero = {k: np.zeros_like(net.params[k]) for k in net.trainable_names()}
    state = OptState(weight_decay=0.5)
    for t in range(10):
        weight_decay_step(net, zero, state, Schedule("constant", 0.1), t)
    for k in net.params:
        assert np.allclose(net.params[k], w0[k] * 0.95 ** 10, rtol=1e-13)


def test_weight_decay_frozen_tensor_untouched():
    net = tiny(train_readin=False)
    w0 = net.params["readin"].copy()
    zero = {k: np.zeros_like(net.params[k]) for k in net.trainable_names()}
    weight_decay_step(net, zero, OptState(weight_decay=0.5), Schedule("constant", 0.1), 0)
    assert np.array_equal(net.params["readin"], w0)


def test_weight_decay_tracks_exponential():
    # Euler error of (1 - eta lambda)^t against exp(-eta lambda t) is O(eta lambda) per unit time
    net = tiny()
    zero = {k: np.zeros_like(net.params[k]) for k in net.trainable_names()}
    lam, eta0 = 1.0, 0.01
    w0 = net.params["readout"].copy()
    for t in range(100):
        optimizer_step(net, zero, OptState(weight_decay=lam), Schedule("constant", eta0), t)
    ratio = net.params["readout"] / w0
    exact = math.exp(-eta0 * lam * 100)
    assert np.all(np.abs(ratio - exact) <= eta0 * lam * 1.0 * exact)


def test_weight_decay_rejects_unstable_rate():
    net = tiny()
    with pytest.raises(ValueError):
        weight_decay_step(net, {}, OptState(weight_decay=10.0), Schedule("constant", 0.1), 0)


def test_nonfinite_gradient_raises():
    net = tiny()
    with pytest.raises(DivergenceError):
        sgd_step(net, {"readout": np.full(6, np.nan)}, Schedule("constant", 0.1), 0)


def test_state_validation():
    with pytest.raises(ValueError):
        OptState(alpha=1.0)
    with pytest.raises(ValueError):
        OptState(weight_decay=-1.0)


def test_one_step_logit_change_width_invariant():
    X, y = batch(P=8, D=16)
    changes = []
    for N in (128, 512, 2048):
        cfg = ParamConfig(N=N, L=8, D=16, act="relu", eta0=0.2)
        net = init_network(cfg, RngStream(3), method="implicit")
        f0 = forward(net, X).f
        sgd_step(net, loss_and_grads(net, X, y, lowrank=True)[2], Schedule("constant", 0.2), 0)
        changes.append(np.sqrt(np.mean((forward(net, X).f - f0) ** 2)))
    assert max(changes) / min(changes) < 2.0
    assert effective_lr(cfg, 0.2) == pytest.approx(0.2 * 2048)
