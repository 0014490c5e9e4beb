import itertools

import numpy as np
import pytest

from depthlab.numerics import RngStream
from depthlab.parameterization import MUP_SQRTL, SP, ParamConfig, Scheme, hidden_branch_scale
from depthlab.resnet import (
    DivergenceError,
    backward,
    block_name,
    finite_diff_grad,
    finite_diff_grad_naive,
    forward,
    init_network,
    load_checkpoint,
    loss_and_grads,
    relative_error,
    save_checkpoint,
)


def small_cfg(**kw):
    base = dict(N=16, L=8, D=6, act="tanh")
    base.update(kw)
    return ParamConfig(**base)


def data(P=4, D=6, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(P, D)), rng.normal(size=P)


def test_init_variance(stream):
    net = init_network(ParamConfig(N=512, L=2, D=8), stream)
    for l in (1, 2):
        assert abs(net.block(l, 0).var() - 1.0) < 0.02


def test_zero_block_readout(stream):
    net = init_network(small_cfg(K=3, zero_block_readout=True), stream)
    for l in range(1, 9):
        assert np.all(net.block(l, 2) == 0)
        assert np.any(net.block(l, 0) != 0)


def test_init_is_deterministic():
    a = init_network(small_cfg(), RngStream(4))
    b = init_network(small_cfg(), RngStream(4))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_identity_path_with_zero_hidden_weights(stream):
    cfg = small_cfg(act="linear")
    net = init_network(cfg, stream)
    for l in range(1, cfg.L + 1):
        net.params[block_name(l, 0)][:] = 0
    X, _ = data()
    tr = forward(net, X)
    for l in range(cfg.L + 1):
        assert np.array_equal(tr.h[l], tr.h[0])
    c = (cfg.N ** -0.5) / (cfg.gamma0 * np.sqrt(cfg.N))
    assert np.allclose(tr.f, c * tr.h[0] @ net.params["readout"], rtol=1e-14)


def test_zero_readout_gives_zero_output(stream):
    net = init_network(small_cfg(), stream)
    net.params["readout"][:] = 0
    assert np.all(forward(net, data()[0]).f == 0)


def test_hand_evaluated_two_by_two_network():
    # N=2, L=2, D=1, linear, SP scheme (all scales 1)
    cfg = ParamConfig(N=2, L=2, D=1, act="linear", scheme=SP)
    net = init_network(cfg, RngStream(0))
    net.params["readin"] = np.array([[1.0], [-2.0]])
    net.params[block_name(1, 0)] = np.array([[0.5, 1.0], [0.0, -1.0]])
    net.params[block_name(2, 0)] = np.array([[2.0, 0.0], [1.0, 1.0]])
    net.params["readout"] = np.array([3.0, -1.0])
    x = 0.5
    h1 = [1.0 * x, -2.0 * x]                                   # [0.5, -1.0]
    b1 = [0.5 * h1[0] + 1.0 * h1[1], -1.0 * h1[1]]             # [-0.75, 1.0]
    h2 = [h1[0] + b1[0], h1[1] + b1[1]]                        # [-0.25, 0.0]
    b2 = [2.0 * h2[0], h2[0] + h2[1]]                          # [-0.5, -0.25]
    h3 = [h2[0] + b2[0], h2[1] + b2[1]]                        # [-0.75, -0.25]
    f = 3.0 * h3[0] - 1.0 * h3[1]                              # -2.0
    tr = forward(net, np.array([[x]]))
    assert tr.f[0] == f == -2.0
    assert tr.h[2].tolist() == [h3]


def test_residual_increment_is_reconstructible(stream):
    cfg = small_cfg(K=2)
    net = init_network(cfg, stream)
    tr = forward(net, data()[0])
    beta = hidden_branch_scale(cfg)
    for l in range(1, cfg.L + 1):
        branch = beta * np.tanh(tr.inner[l - 1, 0]) @ net.block(l, 1).T
        assert np.allclose(tr.h[l] - tr.h[l - 1], branch, atol=1e-14)


def test_divergence_flag(stream):
    net = init_network(small_cfg(), stream)
    net.params["readout"][:] = 1e12
    tr = forward(net, data()[0])
    assert tr.diverged
    with pytest.raises(DivergenceError):
        backward(net, tr, np.ones(4))
    net.params["readout"][0] = np.nan
    assert forward(net, data()[0]).diverged


def test_zero_error_gives_zero_gradients(stream):
    net = init_network(small_cfg(), stream)
    bt = backward(net, forward(net, data()[0]), np.zeros(4))
    assert all(np.all(g == 0) for g in bt.grads.values())


def test_linear_identity_path_gradients_equal(stream):
    cfg = small_cfg(act="linear")
    net = init_network(cfg, stream)
    for l in range(1, cfg.L + 1):
        net.params[block_name(l, 0)][:] = 0
    bt = backward(net, forward(net, data()[0]), np.ones(4))
    for l in range(cfg.L + 1):
        assert np.array_equal(bt.g[l], bt.g[-1])


SCHEMES = [SP, Scheme("mup"), MUP_SQRTL, Scheme("mup_alpha", 1.0)]


@pytest.mark.parametrize("scheme", SCHEMES, ids=str)
@pytest.mark.parametrize("K", [1, 2, 3])
@pytest.mark.parametrize("flags", list(itertools.product([True, False], repeat=2)))
def test_backward_matches_finite_differences(scheme, K, flags):
    cfg = small_cfg(K=K, scheme=scheme, train_readin=flags[0], train_readout=flags[1], gamma0=0.8)
    net = init_network(cfg, RngStream(2))
    X, y = data()
    _, _, grads = loss_and_grads(net, X, y)
    fd = finite_diff_grad(net, X, y, epsilon=1e-5)
    assert set(grads) == set(fd)
    for name in grads:
        assert relative_error(grads[name], fd[name]) < 1e-5, name


def test_batched_and_naive_differences_agree():
    cfg = ParamConfig(N=4, L=2, D=3, K=2, act="tanh", scheme=SP)
    net = init_network(cfg, RngStream(1))
    X, y = data(P=3, D=3)
    a = finite_diff_grad(net, X, y)
    b = finite_diff_grad_naive(net, X, y)
    for k in a:
        assert relative_error(a[k], b[k]) < 1e-8


def test_finite_differences_are_second_order():
    cfg = ParamConfig(N=8, L=3, D=4, act="tanh")
    net = init_network(cfg, RngStream(3))
    X, y = data(P=2, D=4)
    _, _, grads = loss_and_grads(net, X, y)
    names = [block_name(2, 0)]
    e1 = relative_error(finite_diff_grad(net, X, y, epsilon=1e-3, names=names)[names[0]], grads[names[0]])
    e2 = relative_error(finite_diff_grad(net, X, y, epsilon=5e-4, names=names)[names[0]], grads[names[0]])
    assert 3.0 < e1 / e2 < 5.0


def test_finite_differences_exact_on_quadratic():
    # linear net, MSE: the loss is quadratic in the read-out, so central differences are exact up to round-off
    cfg = ParamConfig(N=5, L=2, D=3, act="linear", train_readin=False)
    net = init_network(cfg, RngStream(8))
    X, y = data(P=3, D=3)
    _, _, grads = loss_and_grads(net, X, y)
    fd = finite_diff_grad(net, X, y, epsilon=1e-3, names=["readout"])
    assert relative_error(fd["readout"], grads["readout"]) < 1e-9


def test_finite_difference_epsilon_range(stream):
    net = init_network(small_cfg(), stream)
    with pytest.raises(ValueError):
        finite_diff_grad(net, *data(), epsilon=1e-2)


def test_frozen_tensors_have_no_gradient(stream):
    net = init_network(small_cfg(train_readin=False, train_readout=False), stream)
    _, _, grads = loss_and_grads(net, *data())
    assert "readin" not in grads and "readout" not in grads


def test_checkpoint_round_trip(tmp_path, stream):
    cfg = small_cfg(K=2)
    net = init_network(cfg, stream)
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    header = path.read_bytes().split(b"\n", 1)[0].decode()
    assert header.startswith("depthlab-checkpoint 1 readin:16x6 block.1.0:16x16")
    assert header.endswith("readout:1x16")
    back = load_checkpoint(path, cfg)
    for k in net.params:
        assert np.array_equal(net.params[k], back.params[k])
    with pytest.raises(ValueError):
        load_checkpoint(path, small_cfg(K=1))
