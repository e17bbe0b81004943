import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmfuse import nn
from conftest import as_layers, ref_ce, ref_forward


def net_from(*layers):
    return nn.DenseNetwork([nn.DenseLayer(np.array(W, float), np.array(b, float), a) for W, b, a in layers])


# ---------------------------------------------------------------- forward


def test_identity_layer():
    net = net_from((np.eye(2), [0, 0], "identity"))
    np.testing.assert_array_equal(nn.forward(net, [1, 2]), [1, 2])


def test_relu_then_identity_by_hand():
    net = net_from(([[-1, 0], [0, 1]], [0, 0], "relu"), (np.eye(2), [0, 0], "identity"))
    np.testing.assert_array_equal(nn.forward_hidden(net, [1, 2], 0), [0, 2])
    np.testing.assert_array_equal(nn.forward(net, [1, 2]), [0, 2])


def test_wrong_input_length():
    net = net_from((np.eye(2), [0, 0], "identity"))
    with pytest.raises(nn.ShapeError):
        nn.forward(net, [1, 2, 3])
    with pytest.raises(nn.ShapeError):
        nn.forward_hidden(net, [1], 0)


def test_last_hidden_index_is_forward():
    net = nn.init_network([5, 7, 3], seed=1)
    x = np.arange(5.0)
    np.testing.assert_array_equal(nn.forward_hidden(net, x, 1), nn.forward(net, x))


def test_identity_net_any_index():
    net = net_from((np.eye(3), [0, 0, 0], "identity"), (np.eye(3), [0, 0, 0], "identity"))
    for i in range(2):
        np.testing.assert_array_equal(nn.forward_hidden(net, [4, 5, 6], i), [4, 5, 6])


def test_mlp1_penultimate_width():
    from mmfuse.unimodal import MlpSpec
    net = MlpSpec("MLP-1", 34).build(0)
    assert net.dims == [34, 64, 64, 32, 2]
    assert nn.forward_hidden(net, np.zeros(34), 2).shape == (32,)


def test_mismatched_layers_rejected():
    with pytest.raises(nn.ShapeError):
        net_from((np.eye(2), [0, 0], "relu"), (np.eye(3), [0, 0, 0], "identity"))


@given(st.integers(0, 10_000))
def test_batch_matches_rowwise_oracle(seed):
    rng = np.random.default_rng(seed)
    dims = list(rng.integers(1, 6, size=rng.integers(1, 4))) + [int(rng.integers(2, 5))]
    net = nn.init_network(dims, seed)
    X = rng.normal(size=(4, dims[0]))
    out = nn.forward(net, X)
    for x, o in zip(X, out):
        np.testing.assert_allclose(o, ref_forward(as_layers(net), x), atol=1e-12)


# ---------------------------------------------------------------- softmax, crispify, cross-entropy


def test_softmax_symmetric():
    for k in (0.1, 1, 7):
        np.testing.assert_allclose(nn.softmax_k([0, 0], k), [0.5, 0.5])


def test_softmax_ln2():
    np.testing.assert_allclose(nn.softmax_k([math.log(2), 0], 1), [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_large_k_one_hot():
    assert np.max(np.abs(nn.softmax_k([0.3, 0.1], 1e4) - [1, 0])) < 1e-6


def test_softmax_rejects_nonpositive_k():
    with pytest.raises(ValueError):
        nn.softmax_k([1, 2], 0)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(0.01, 100))
def test_softmax_normalized_and_argmax_invariant(z, k):
    y = nn.softmax_k(z, k)
    assert abs(y.sum() - 1) < 1e-9
    assert np.all(y >= 0)
    assert np.argmax(y) == np.argmax(nn.softmax_k(z, 1.0))


def test_crispify_examples():
    np.testing.assert_array_equal(nn.crispify([0.2, 0.9]), [0, 1])
    np.testing.assert_array_equal(nn.crispify([0.5, 0.5]), [1, 0])
    np.testing.assert_array_equal(nn.crispify([3, 1, 2]), [1, 0, 0])


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=6))
def test_crispify_single_one(z):
    y = nn.crispify(z)
    assert y.sum() == 1 and set(np.unique(y)) <= {0.0, 1.0}
    assert int(np.argmax(y)) == min(i for i, v in enumerate(z) if v == max(z))


def test_cross_entropy_examples():
    assert nn.cross_entropy([1, 0], 0) == pytest.approx(0.0, abs=1e-15)
    assert nn.cross_entropy([0.5, 0.5], 1) == pytest.approx(math.log(2))
    assert nn.cross_entropy([1, 0], 1) == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValueError):
        nn.cross_entropy([0.5, 0.5], 5)


# ---------------------------------------------------------------- gradients


def numeric_grads(net, X, y, k, h=1e-5):
    """Central differences of the mean loss, using the independent oracle forward."""
    out = []
    for p in net.params():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = np.mean([ref_ce(ref_forward(as_layers(net), x), t, k) for x, t in zip(X, y)])
            p[idx] = old - h
            dn = np.mean([ref_ce(ref_forward(as_layers(net), x), t, k) for x, t in zip(X, y)])
            p[idx] = old
            g[idx] = (up - dn) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    a = np.concatenate([x.ravel() for x in a])
    b = np.concatenate([x.ravel() for x in b])
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = nn.init_network([4, 5, 3, 2], seed)
    for layer in net.layers:
        layer.bias[:] = rng.normal(scale=0.5, size=layer.bias.shape)
    X = rng.normal(size=(3, 4))
    y = rng.integers(0, 2, size=3)
    k = float(rng.uniform(0.5, 3))
    assert rel_err(nn.backward(net, X, y, k), numeric_grads(net, X, y, k)) < 1e-4


def test_bias_gradient_zero_weight_net():
    net = net_from((np.zeros((2, 3)), [0.0, 0.0], "identity"))
    g = nn.backward(net, [1.0, -2.0, 0.5], 1)
    np.testing.assert_allclose(g[1], [0.5, -0.5])
    np.testing.assert_allclose(g[0], np.outer([0.5, -0.5], [1.0, -2.0, 0.5]))


def test_doubling_k_doubles_logit_gradient():
    net = net_from((np.zeros((2, 2)), [0.3, 0.3], "identity"))
    g1 = nn.backward(net, [1.0, 1.0], 0, k=1.0)[1]
    g2 = nn.backward(net, [1.0, 1.0], 0, k=2.0)[1]
    np.testing.assert_allclose(g2, 2 * g1)


def test_vjp_matches_jacobian():
    z = np.array([0.2, -1.0, 0.7])
    k = 3.0
    y = nn.softmax_k(z, k)
    J = k * (np.diag(y) - np.outer(y, y))
    g = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(nn.softmax_k_vjp(y, g, k), J.T @ g, atol=1e-14)


# ---------------------------------------------------------------- Adam


def test_adam_zero_grad_keeps_params():
    p = [np.array([1.0, -2.0])]
    state = nn.AdamState.for_params(p)
    nn.adam_step(p, [np.zeros(2)], state, 0.1)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_by_hand():
    p = [np.array([0.0])]
    state = nn.AdamState.for_params(p)
    nn.adam_step(p, [np.array([1.0])], state, 0.1)
    # m_hat = 1, v_hat = 1 after bias correction
    assert p[0][0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)


def test_adam_state_shapes_persist():
    p = [np.ones((3, 2)), np.ones(3)]
    state = nn.AdamState.for_params(p)
    for _ in range(3):
        nn.adam_step(p, [np.ones((3, 2)), np.ones(3)], state, 0.01)
    assert [m.shape for m in state.first_moment] == [(3, 2), (3,)]
    assert state.step_count == 3


# ---------------------------------------------------------------- training loop


def separable(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 2))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int)
    keep = np.abs(X[:, 0] + 0.5 * X[:, 1]) > 0.05
    return X[keep], y[keep]


def test_separable_reaches_full_train_accuracy():
    X, y = separable()
    # oracle: a plain perceptron separates the data, so a linear classifier can reach 100%
    w = np.zeros(3)
    Xa = np.hstack([X, np.ones((len(X), 1))])
    for _ in range(1000):
        wrong = np.sign(Xa @ w) != 2 * y - 1
        if not wrong.any():
            break
        i = np.flatnonzero(wrong)[0]
        w += (2 * y[i] - 1) * Xa[i]
    assert np.all(np.sign(Xa @ w) == 2 * y - 1)
    net = nn.init_network([2, 2], seed=0)
    cfg = nn.TrainConfig(learning_rate=0.05, max_epochs=300, early_stop_patience=300)
    trained, log = nn.train(net, (X, y), (X, y), cfg)
    assert nn.accuracy(trained, X, y) == 1.0
    assert log.n_epochs <= 300


def test_training_is_deterministic():
    X, y = separable(seed=3)
    cfg = nn.TrainConfig(max_epochs=15, seed=7)
    a, _ = nn.train(nn.init_network([2, 4, 2], 1), (X, y), (X, y), cfg)
    b, _ = nn.train(nn.init_network([2, 4, 2], 1), (X, y), (X, y), cfg)
    for p, q in zip(a.params(), b.params()):
        assert p.tobytes() == q.tobytes()


def test_train_leaves_input_untouched():
    X, y = separable(seed=4)
    net = nn.init_network([2, 3, 2], 2)
    before = [p.copy() for p in net.params()]
    nn.train(net, (X, y), (X, y), nn.TrainConfig(max_epochs=3))
    for p, q in zip(before, net.params()):
        np.testing.assert_array_equal(p, q)


def test_plateau_reduces_lr_once():
    cfg = nn.TrainConfig(learning_rate=0.01)
    sched = nn.PlateauSchedule(cfg)
    assert sched.step(1.0)
    for _ in range(10):
        sched.step(1.0)
    assert sched.n_reductions == 1
    assert sched.lr == pytest.approx(0.001)
    assert not sched.should_stop


def test_early_stop_after_patience_and_best_restored():
    p = [np.array([0.0])]
    losses = iter([5.0, 1.0] + [2.0] * 100)
    cfg = nn.TrainConfig(max_epochs=100, early_stop_patience=25)
    snapshots = []

    def batch(idx):
        return 0.0, [np.array([1.0])]

    def val():
        v = next(losses)
        snapshots.append(p[0].copy())
        return v

    log = nn.fit(p, batch, val, 4, cfg)
    # losses[0] is the pre-training check; epoch 0 scores 1.0 and stays best
    assert log.best_epoch == 0
    assert log.n_epochs == 26 and log.stopped_early
    np.testing.assert_array_equal(p[0], snapshots[1])


def test_starting_point_kept_when_training_never_helps():
    p = [np.array([3.0])]
    cfg = nn.TrainConfig(max_epochs=30, early_stop_patience=5)
    # a negative gradient pushes p upward, so every epoch scores worse than the start
    log = nn.fit(p, lambda idx: (0.0, [np.array([-1.0])]), lambda: float(p[0][0] ** 2), 8, cfg)
    assert log.best_epoch == -1
    assert p[0][0] == 3.0


def test_nonfinite_loss_raises_with_epoch():
    p = [np.array([0.0])]
    with pytest.raises(nn.TrainingError) as err:
        nn.fit(p, lambda idx: (math.nan, [np.zeros(1)]), lambda: 1.0, 2, nn.TrainConfig())
    assert err.value.epoch == 0


def test_config_validation():
    with pytest.raises(ValueError):
        nn.TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        nn.TrainConfig(batch_size=0)


# ---------------------------------------------------------------- serialization


@given(st.integers(0, 1000))
def test_network_roundtrip_exact(seed):
    net = nn.init_network([3, 4, 2], seed)
    back = nn.loads_network(nn.dumps_network(net))
    assert back.dims == net.dims
    for p, q in zip(net.params(), back.params()):
        assert p.tobytes() == q.tobytes()
    assert [l.activation for l in back.layers] == [l.activation for l in net.layers]


def test_loads_rejects_garbage():
    with pytest.raises(ValueError):
        nn.loads_network("not a network\n")
