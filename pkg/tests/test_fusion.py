import hashlib
from functools import reduce

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmfuse import fusion as fu
from mmfuse import nn
from conftest import as_layers, ref_ce, ref_forward


def digest(arrays):
    return hashlib.sha256(b"".join(np.ascontiguousarray(a).tobytes() for a in arrays)).hexdigest()


def two_modalities(seed=0, n=6, dims=(3, 4), members=(("a", "x"), ("b", "y"))):
    rng = np.random.default_rng(seed)
    inputs = {"a": rng.normal(size=(n, dims[0])), "b": rng.normal(size=(n, dims[1]))}
    nets = [nn.init_network([dims[0 if m == "a" else 1], 5, 3, 2], seed + i) for i, (m, _) in enumerate(members)]
    for net in nets:
        for layer in net.layers:
            layer.bias[:] = rng.normal(scale=0.3, size=layer.bias.shape)
    return inputs, nets, rng.integers(0, 2, n)


# ---------------------------------------------------------------- shared representation and heads


def test_soft_shared_symmetric():
    spec = fu.FusionSpec("soft", "head1_linear", (("a", "x"), ("b", "y")))
    np.testing.assert_array_equal(fu.shared_representation([np.zeros(2), np.zeros(2)], spec), [0.5] * 4)


def test_crisp_shared_example():
    spec = fu.FusionSpec("crisp", "head1_linear", (("a", "x"), ("b", "y")))
    out = fu.shared_representation([np.array([0.2, 0.9]), np.array([3.0, 1.0])], spec)
    np.testing.assert_array_equal(out, [0, 1, 1, 0])


@given(st.integers(1, 6), st.integers(2, 4), st.sampled_from(["soft", "crisp"]))
def test_shared_length_and_blocks(m, c, mode):
    rng = np.random.default_rng(m * 10 + c)
    spec = fu.FusionSpec(mode, "head1_linear", tuple((f"m{i}", "A") for i in range(m)), c=c)
    out = fu.shared_representation([rng.normal(size=(3, c)) for _ in range(m)], spec)
    assert out.shape == (3, c * m)
    sums = out.reshape(3, m, c).sum(axis=2)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)
    if mode == "crisp":
        assert set(np.unique(out)) <= {0.0, 1.0}


def test_head_parameter_counts():
    spec = fu.FusionSpec("soft", "head1_linear", tuple((f"m{i}", "A") for i in range(4)))
    assert fu.build_head(spec).dims == [8, 2] and fu.build_head(spec).n_params() == 18
    spec2 = fu.FusionSpec("soft", "head2_hidden4", spec.members)
    assert fu.build_head(spec2).dims == [8, 4, 2] and fu.build_head(spec2).n_params() == 46


def test_head_input_mismatch():
    inputs, nets, _ = two_modalities()
    model = fu.build_fusion("jlf-s-1", [("a", "x"), ("b", "y")], nets)
    model.head_net = nn.init_network([5, 2], 0)
    with pytest.raises(nn.ShapeError):
        fu.fusion_forward(model, inputs)


def test_spec_validation():
    with pytest.raises(fu.FusionError):
        fu.FusionSpec("fuzzy", "head1_linear", (("a", "x"),))
    with pytest.raises(fu.FusionError):
        fu.FusionSpec("soft", "head1_linear", (("a", "x"), ("a", "x")))
    with pytest.raises(fu.FusionError):
        fu.parse_variant("jlf-q-3")


def test_variant_names():
    assert fu.parse_variant("JLF-C-2") == fu.Variant("jlf-c-2", "jlf", "crisp", "head2_hidden4")
    assert fu.parse_variant("lf-mv").kind == "mv"
    assert len(fu.VARIANTS) == 11


# ---------------------------------------------------------------- feature-level fusion


def test_concat_examples():
    head = nn.DenseNetwork([nn.DenseLayer(np.zeros((2, 3)), np.array([0.7, -0.2]), "identity")])
    ident = nn.DenseNetwork([nn.DenseLayer(np.eye(3), np.zeros(3), "identity")])
    np.testing.assert_array_equal(fu.jf_concat([np.array([1.0, 2.0]), np.array([3.0])], ident), [1, 2, 3])
    np.testing.assert_array_equal(fu.jf_concat([np.zeros(2), np.zeros(1)], head), [0.7, -0.2])


def test_linear_concat_head_blockwise():
    rng = np.random.default_rng(4)
    v = [rng.normal(size=2), rng.normal(size=3)]
    W, b = rng.normal(size=(2, 5)), rng.normal(size=2)
    head = nn.DenseNetwork([nn.DenseLayer(W, b, "identity")])
    oracle = W[:, :2] @ v[0] + W[:, 2:] @ v[1] + b
    assert np.max(np.abs(fu.jf_concat(v, head) - oracle)) <= 1e-12


def test_kron_example():
    a, b, c, d = 2.0, 3.0, 5.0, 7.0
    out = fu.jf_kron([np.array([a, b]), np.array([c, d])])
    np.testing.assert_array_equal(out, [a * c, a * d, a, b * c, b * d, b, c, d, 1])


def test_kron_zero_and_lengths():
    out = fu.jf_kron([np.zeros(2), np.zeros(3)])
    assert out[-1] == 1 and out.sum() == 1
    assert fu.jf_kron([np.ones(2), np.ones(3), np.ones(2)]).shape == (36,)
    with pytest.raises(fu.FusionError):
        fu.jf_kron([np.ones(2)])


@given(st.integers(0, 1000))
def test_kron_matches_numpy(seed):
    rng = np.random.default_rng(seed)
    vs = [rng.normal(size=rng.integers(1, 4)) for _ in range(rng.integers(2, 4))]
    oracle = reduce(np.kron, [np.append(v, 1.0) for v in vs])
    np.testing.assert_allclose(fu.jf_kron(vs), oracle, atol=1e-12)
    batch = fu.jf_kron([np.stack([v, v]) for v in vs])
    np.testing.assert_allclose(batch[1], oracle, atol=1e-12)


# ---------------------------------------------------------------- gradients


def oracle_loss(model, inputs, labels):
    """Loss recomputed with loops and numpy's kron, sharing nothing with the engine."""
    total = 0.0
    for i, t in enumerate(labels):
        if model.kind in ("jlf", "lf"):
            parts = []
            for (mod, _), net in zip(model.spec.members, model.member_nets):
                z = ref_forward(as_layers(net), inputs[mod][i]) * model.spec.k_soft
                e = np.exp(z - z.max())
                parts.append(e / e.sum())
            fused = np.concatenate(parts)
        else:
            encs = {}
            for (mod, _), net, li in zip(model.spec.members, model.member_nets, model.encoding_layers):
                enc = ref_forward(as_layers(net)[: li + 1], inputs[mod][i])
                encs.setdefault(mod, []).append(enc)
            groups = [np.concatenate(v) for v in encs.values()]
            if model.kind == "jf-c":
                fused = np.concatenate(groups)
            else:
                fused = reduce(np.kron, [np.append(g, 1.0) for g in groups])
        total += ref_ce(ref_forward(as_layers(model.head_net), fused), t)
    return total / len(labels)


def fd_grads(model, inputs, labels, h=1e-5):
    out = []
    for p in model.params():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = oracle_loss(model, inputs, labels)
            p[idx] = old - h
            dn = oracle_loss(model, inputs, labels)
            p[idx] = old
            g[idx] = (up - dn) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    a = np.concatenate([x.ravel() for x in a])
    b = np.concatenate([x.ravel() for x in b])
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("variant", ["jlf-s-1", "jlf-s-2", "jf-c", "jf-m"])
@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(variant, seed):
    members = [("a", "x"), ("b", "y")]
    inputs, nets, y = two_modalities(seed, n=4)
    model = fu.build_fusion(variant, members, nets, k_soft=1.7, seed=seed)
    for layer in model.head_net.layers:
        layer.bias[:] = 0.1
    loss, grads = fu.fusion_loss_and_grads(model, inputs, y)
    assert loss == pytest.approx(oracle_loss(model, inputs, y), rel=1e-12)
    assert rel_err(grads, fd_grads(model, inputs, y)) < 1e-4


def test_jf_m_groups_members_of_one_modality():
    members = [("a", "x"), ("a", "z"), ("b", "y")]
    rng = np.random.default_rng(3)
    inputs = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=(3, 4))}
    nets = [nn.init_network([3, 4, 2], 1), nn.init_network([3, 2, 2], 2), nn.init_network([4, 3, 2], 3)]
    model = fu.build_fusion("jf-m", members, nets, seed=1)
    assert model.head_net.input_dim == (4 + 2 + 1) * (3 + 1)
    _, grads = fu.fusion_loss_and_grads(model, inputs, [0, 1, 1])
    assert rel_err(grads, fd_grads(model, inputs, [0, 1, 1])) < 1e-4


def test_jf_m_needs_two_modalities():
    _, nets, _ = two_modalities()
    with pytest.raises(fu.FusionError):
        fu.build_fusion("jf-m", [("a", "x"), ("a", "y")], [nets[0], nets[0]])


def test_crisp_straight_through_equals_soft_far_from_boundary():
    members = [("a", "x"), ("b", "y")]
    inputs, nets, y = two_modalities(7, n=5)
    for net in nets:
        net.layers[-1].weights *= 40  # wide logit gaps keep every row far from an argmax tie
        net.layers[-1].bias[:] = [2.0, -2.0]
    soft = fu.build_fusion("jlf-s-1", members, nets, k_soft=50.0, seed=2)
    crisp = fu.build_fusion("jlf-c-1", members, nets, k_st=50.0, seed=2)
    gaps = [np.abs(np.diff(nn.forward(n, inputs[m]), axis=1)) for (m, _), n in zip(members, nets)]
    assert min(g.min() for g in gaps) > 1.0
    _, gs = fu.fusion_loss_and_grads(soft, inputs, y)
    _, gc = fu.fusion_loss_and_grads(crisp, inputs, y)
    assert rel_err(gs, gc) < 1e-6


def test_crisp_forward_is_hard():
    inputs, nets, _ = two_modalities(2)
    model = fu.build_fusion("jlf-c-1", [("a", "x"), ("b", "y")], nets)
    S = fu.fused_input(model, inputs)
    assert set(np.unique(S)) <= {0.0, 1.0}
    np.testing.assert_array_equal(S.reshape(len(S), 2, 2).sum(axis=2), 1)


# ---------------------------------------------------------------- training


def complementary_data(seed, n=600):
    rng = np.random.default_rng(seed)
    za, zb = rng.normal(size=n), rng.normal(size=n)
    y = ((za > -0.2) & (zb > -0.2)).astype(int)
    Xa = np.c_[za + 0.3 * rng.normal(size=n), rng.normal(size=(n, 2))]
    Xb = np.c_[zb + 0.3 * rng.normal(size=n), rng.normal(size=(n, 2))]
    return fu.FusionData({"a": Xa, "b": Xb}, y)


def pretrained_members(data, tr, va, seed):
    nets = []
    for m in ("a", "b"):
        X = data.inputs[m]
        net, _ = nn.train(nn.init_network([3, 8, 2], seed), (X[tr], data.labels[tr]), (X[va], data.labels[va]),
                          nn.TrainConfig(max_epochs=40, seed=seed))
        nets.append(net)
    return nets


def test_joint_training_does_not_lose_validation_accuracy():
    gains = []
    for seed in range(5):
        data = complementary_data(seed)
        tr, va = np.arange(400), np.arange(400, 600)
        nets = pretrained_members(data, tr, va, seed)
        members = [("a", "m"), ("b", "m")]
        cfg = nn.TrainConfig(max_epochs=40, seed=seed)
        lf, _ = fu.fit_variant(fu.build_fusion("lf-s-1", members, nets, seed=seed), data.subset(tr), data.subset(va), cfg)
        jlf, _ = fu.fit_variant(fu.build_fusion("jlf-s-1", members, nets, seed=seed), data.subset(tr), data.subset(va), cfg)
        gains.append(fu.evaluate_fusion(jlf, data.subset(va)).acc - fu.evaluate_fusion(lf, data.subset(va)).acc)
    assert np.mean(gains) >= 0


def test_freezing_everything_is_a_no_op():
    data = complementary_data(0, 64)
    model = fu.build_fusion("jlf-s-1", [("a", "x"), ("b", "y")], [nn.init_network([3, 4, 2], 0), nn.init_network([3, 4, 2], 1)])
    before = digest(model.params())
    trained, _ = fu.train_fusion(model, data, data, nn.TrainConfig(max_epochs=1), members=False, head=False)
    assert digest(trained.params()) == before


def test_lf_keeps_member_weights():
    data = complementary_data(1, 200)
    nets = [nn.init_network([3, 4, 2], 0), nn.init_network([3, 4, 2], 1)]
    members = [("a", "x"), ("b", "y")]
    model = fu.build_fusion("lf-c-2", members, nets)
    before = digest(model.params(head=False))
    trained, _ = fu.fit_variant(model, data, data, nn.TrainConfig(max_epochs=5))
    assert digest(trained.params(head=False)) == before
    assert trained.trained and trained.frozen_members


def test_jlf_and_lf_start_identical():
    nets = [nn.init_network([3, 4, 2], 0), nn.init_network([3, 4, 2], 1)]
    members = [("a", "x"), ("b", "y")]
    j = fu.build_fusion("jlf-s-2", members, nets, seed=9)
    l = fu.build_fusion("lf-s-2", members, nets, seed=9)
    assert digest(j.params()) == digest(l.params())
    assert not j.frozen_members and l.frozen_members


def test_head1_separable_shared_vectors():
    # crisp shared vectors whose label is "member 0 says class 1" are linearly separable
    rng = np.random.default_rng(0)
    bits = rng.integers(0, 2, size=(200, 2))
    S = np.concatenate([np.eye(2)[bits[:, 0]], np.eye(2)[bits[:, 1]]], axis=1)
    y = bits[:, 0]
    spec = fu.FusionSpec("crisp", "head1_linear", (("a", "x"), ("b", "y")))
    head, _ = nn.train(fu.build_head(spec, 0), (S, y), (S, y), nn.TrainConfig(learning_rate=0.05, max_epochs=200))
    assert nn.accuracy(head, S, y) == 1.0


def test_mv_predicts_by_vote():
    inputs, nets, _ = two_modalities(5, n=20)
    model = fu.build_fusion("lf-mv", [("a", "x"), ("b", "y")], nets)
    za, zb = nn.forward(nets[0], inputs["a"]), nn.forward(nets[1], inputs["b"])
    sa, sb = nn.softmax_k(za), nn.softmax_k(zb)
    la, lb = za.argmax(1), zb.argmax(1)
    oracle = np.where(la == lb, la, np.argmax(sa + sb, axis=1))
    np.testing.assert_array_equal(fu.predict_labels(model, inputs), oracle)


# ---------------------------------------------------------------- metrics and serialization


def test_metric_examples():
    assert fu.binary_metrics([0, 1, 1], [0, 1, 1]).as_tuple() == (1.0, 1.0, 1.0)
    assert fu.binary_metrics([0, 1, 0, 1], [1, 1, 1, 1]).as_tuple() == (0.5, 1.0, 0.0)
    m = fu.binary_metrics([0, 0], [0, 1])
    assert np.isnan(m.tpr) and m.tnr == 0.5


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50))
def test_metrics_match_confusion_recount(pairs):
    t, p = map(list, zip(*pairs))
    tp = sum(1 for a, b in pairs if a == 1 and b == 1)
    tn = sum(1 for a, b in pairs if a == 0 and b == 0)
    m = fu.binary_metrics(t, p)
    assert m.acc == (tp + tn) / len(pairs)
    if t.count(1):
        assert m.tpr == tp / t.count(1)
    if t.count(0):
        assert m.tnr == tn / t.count(0)


@pytest.mark.parametrize("variant", ["jlf-c-2", "lf-s-1", "lf-mv", "jf-c", "jf-m"])
def test_fusion_roundtrip(variant):
    inputs, nets, _ = two_modalities(3)
    model = fu.build_fusion(variant, [("a", "x"), ("b", "y")], nets, k_st=12.5, seed=4)
    back = fu.loads_fusion(fu.dumps_fusion(model))
    assert back.spec == model.spec and back.kind == model.kind
    assert digest(back.params()) == digest(model.params())
    np.testing.assert_array_equal(fu.predict_labels(back, inputs), fu.predict_labels(model, inputs))
