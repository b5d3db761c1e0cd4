import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dlica.nn import (
    Architecture, ShapeError, TrainConfig, ValueNetwork, forward, forward_batch, layer_outputs,
    mae_loss_and_grad, preactivation_bounds, random_network, train, training_mae, value_table, zero_network,
)
from oracles import bits, chain_forward, chain_preactivations

archs = st.tuples(st.integers(1, 6), st.lists(st.integers(1, 6), max_size=2))


def _net(m, hidden, seed):
    return random_network(Architecture.from_hidden(m, hidden), np.random.default_rng(seed))


# -- architecture -----------------------------------------------------------


def test_architecture_validation():
    assert Architecture.from_hidden(4, [3, 2]).layer_dims == (4, 3, 2, 1)
    assert Architecture((5, 1)).depth == 1
    with pytest.raises(ValueError):
        Architecture((3,))
    with pytest.raises(ValueError):
        Architecture((3, 2))
    with pytest.raises(ValueError):
        Architecture((3, 0, 1))


def test_network_shape_and_finiteness_checks():
    with pytest.raises(ShapeError):
        ValueNetwork((np.ones((2, 3)), np.ones((1, 4))), (np.zeros(2), np.zeros(1)))
    with pytest.raises(ValueError):
        ValueNetwork((np.array([[np.nan]]),), (np.zeros(1),))
    with pytest.raises(ShapeError):
        ValueNetwork((np.ones((2, 3)),), (np.zeros(2),))


# -- forward ----------------------------------------------------------------


def test_zero_network_is_zero():
    net = zero_network(Architecture.from_hidden(4, [3]))
    assert forward(net, [1, 0, 1, 1]) == 0.0


def test_dead_relu_example():
    net = ValueNetwork((np.array([[1.0]]), np.array([[1.0]])), (np.array([-2.0]), np.array([0.0])))
    assert forward(net, [1]) == 0.0


def test_forward_dimension_mismatch():
    net = _net(3, [2], 0)
    with pytest.raises(ShapeError):
        forward(net, [1, 0])


@given(archs, st.integers(0, 2**31 - 1))
def test_forward_matches_chain_oracle(arch, seed):
    m, hidden = arch
    net = _net(m, hidden, seed)
    x = bits(seed % (1 << m), m)
    assert forward(net, x) == pytest.approx(chain_forward(net.weights, net.biases, x), abs=1e-12)


@given(archs, st.integers(0, 2**31 - 1))
def test_forward_is_nonnegative(arch, seed):
    m, hidden = arch
    assert np.all(value_table(_net(m, hidden, seed)) >= 0.0)


@given(archs, st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_output_scaling_is_linear(arch, seed, lam):
    m, hidden = arch
    net = _net(m, hidden, seed)
    scaled = net.scaled_output(lam)
    np.testing.assert_allclose(value_table(scaled), lam * value_table(net), rtol=1e-12, atol=1e-12)


def test_layer_outputs_end_in_forward():
    net = _net(5, [4, 3], 3)
    outs = layer_outputs(net, [1, 1, 0, 0, 1])
    assert [o.shape[0] for o in outs] == [5, 4, 3, 1]
    assert outs[-1][0] == forward(net, [1, 1, 0, 0, 1])


def test_serialization_round_trip(tmp_path):
    net = _net(4, [3], 9)
    path = tmp_path / "net.json"
    net.save(path)
    back = ValueNetwork.load(path)
    np.testing.assert_array_equal(value_table(back), value_table(net))
    data = json.loads(path.read_text())
    assert data["schema"] == "dlica.value_network/1"
    assert data["layer_dims"] == [4, 3, 1]


# -- interval bounds --------------------------------------------------------


def test_bounds_one_step_example():
    net = ValueNetwork((np.array([[1.0, -1.0]]),), (np.zeros(1),))
    (lo, hi), = preactivation_bounds(net)
    assert lo[0] == -1.0 and hi[0] == 1.0


def test_bounds_zero_network_are_bias_values():
    ws = (np.zeros((2, 3)), np.zeros((1, 2)))
    bs = (np.array([0.5, -1.0]), np.array([2.0]))
    b = preactivation_bounds(ValueNetwork(ws, bs))
    np.testing.assert_array_equal(b[0][0], [0.5, -1.0])
    np.testing.assert_array_equal(b[0][1], [0.5, -1.0])
    assert b[1][0][0] == 2.0 and b[1][1][0] == 2.0


@given(st.integers(1, 8), st.lists(st.integers(1, 8), max_size=2), st.integers(0, 2**31 - 1))
def test_bounds_contain_every_bundle(m, hidden, seed):
    net = _net(m, hidden, seed)
    bounds = preactivation_bounds(net)
    for mask in range(1 << m):
        for (lo, hi), pre in zip(bounds, chain_preactivations(net.weights, net.biases, bits(mask, m))):
            assert np.all(lo - 1e-12 <= pre) and np.all(np.asarray(pre) <= hi + 1e-12)


# -- training ---------------------------------------------------------------


def _data(m, k, seed):
    rng = np.random.default_rng(seed)
    masks = rng.choice(1 << m, size=k, replace=False)
    X = np.array([bits(int(s), m) for s in masks], dtype=float)
    y = X @ rng.uniform(1.0, 3.0, m) + rng.uniform(0, 1, k)
    return X, y


def test_train_zero_targets():
    X, _ = _data(5, 5, 1)
    arch = Architecture.from_hidden(5, [4])
    net = train(arch, X, np.zeros(5), TrainConfig(epochs=200))
    assert training_mae(net, X, np.zeros(5)) <= 1e-3


def test_train_is_deterministic():
    X, y = _data(6, 15, 2)
    arch = Architecture.from_hidden(6, [8])
    a = train(arch, X, y, TrainConfig(epochs=30, rng_seed=5, dropout_rate=0.1))
    b = train(arch, X, y, TrainConfig(epochs=30, rng_seed=5, dropout_rate=0.1))
    for wa, wb in zip(a.weights + a.biases, b.weights + b.biases):
        np.testing.assert_array_equal(wa, wb)


def test_train_never_worse_than_initial():
    X, y = _data(6, 12, 3)
    arch = Architecture.from_hidden(6, [5])
    cfg = TrainConfig(epochs=1, rng_seed=11)
    net = train(arch, X, y, cfg)
    # the initial network is the same seeded draw, scaled by the label maximum
    init = train(arch, X, y, TrainConfig(epochs=1, rng_seed=11, learning_rate=1e-300))
    assert training_mae(net, X, y) <= training_mae(init, X, y) + 1e-12


def test_train_errors():
    arch = Architecture.from_hidden(3, [2])
    with pytest.raises(ValueError):
        train(arch, np.zeros((0, 3)), np.zeros(0))
    with pytest.raises(ShapeError):
        train(arch, np.zeros((2, 4)), np.zeros(2))
    with pytest.raises(TypeError):
        train(arch, np.zeros((2, 3)))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(dropout_rate=(0.1,)).dropout_for(2)


def test_mae_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    X = rng.integers(0, 2, size=(9, 4)).astype(float)
    t = rng.uniform(0, 2, 9)
    ws = [rng.normal(size=(3, 4)), rng.normal(size=(1, 3))]
    bs = [rng.normal(size=3), rng.normal(size=1) + 3.0]
    loss, gw, gb = mae_loss_and_grad(ws, bs, X, t, l2=1e-3)
    h = 1e-6
    for params, grads in ((ws, gw), (bs, gb)):
        for p, g in zip(params, grads):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up = mae_loss_and_grad(ws, bs, X, t, l2=1e-3)[0]
                p[idx] = old - h
                down = mae_loss_and_grad(ws, bs, X, t, l2=1e-3)[0]
                p[idx] = old
                assert (up - down) / (2 * h) == pytest.approx(g[idx], rel=1e-4, abs=1e-7)


def test_forward_batch_accepts_single_bundle():
    net = _net(3, [2], 1)
    assert forward_batch(net, [1, 0, 1]).shape == (1,)
