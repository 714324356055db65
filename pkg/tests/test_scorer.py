import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import full_loss_gradient_error, point_graph, random_graph
from mapcull import autodiff as ad
from mapcull.graph import closure, sample_subgraph
from mapcull.scorer import (ConfigurationError, ScorerConfig, ScorerModel, attention_weights, dumps_checkpoint,
                            forward, g1_forward, gat_forward, gat_forward_meanvariant, graphconv_forward,
                            load_checkpoint, loads_checkpoint, predict_scores, sageconv_forward,
                            save_checkpoint, score_graph)

VARIANTS = [("gat", "sum"), ("gat", "mean"), ("graphconv", "sum"), ("sage", "sum")]


def leaky(x, s=0.1):
    return np.where(x > 0, x, s * x)


def model_with(cfg, **params):
    m = ScorerModel.zeros(cfg)
    for k, v in params.items():
        m.params[k] = np.asarray(v, dtype=float)
    return m


def layer_input(model, sub):
    P = {k: ad.Tape(record=False).const(v) for k, v in model.params.items()}
    return P, g1_forward(model, sub, P)


def test_g1_identity_and_cancellation():
    cfg = ScorerConfig(descriptor_dim=3, hidden_dim=3, out_dim=2)
    m = model_with(cfg, **{"g1.W": np.eye(3)})
    d = np.array([0.5, 1.0, 2.0])
    sub = closure(point_graph([[d], [d, -d]], []), [0, 1])
    _, h = layer_input(m, sub)
    assert np.array_equal(h.value[0], d)
    assert np.array_equal(h.value[1], np.zeros(3))


def test_g1_matches_matrix_arithmetic():
    rng = np.random.default_rng(0)
    cfg = ScorerConfig(descriptor_dim=4, hidden_dim=5, out_dim=2)
    m = ScorerModel.init(cfg, 3)
    m.params["g1.b"] = rng.normal(size=5)
    descs = rng.normal(size=(3, 4))
    sub = closure(point_graph([list(descs)], []), [0])
    _, h = layer_input(m, sub)
    ref = leaky(descs.sum(axis=0) @ m.params["g1.W"] + m.params["g1.b"])
    assert np.allclose(h.value[0], ref, atol=1e-12, rtol=0)


def test_gat_without_neighbors_returns_own_features():
    cfg = ScorerConfig(descriptor_dim=2, hidden_dim=2, out_dim=2, heads=1)
    m = model_with(cfg, **{"g1.W": np.eye(2), "g2.W": np.eye(2), "g2.a_src": [[1.0, -2.0]],
                           "g2.a_dst": [[0.3, 0.7]]})
    sub = closure(point_graph([[[0.4, 0.9]]], []), [0])
    P, h = layer_input(m, sub)
    assert np.array_equal(gat_forward(m, h, sub, P).value[0], [0.4, 0.9])
    assert np.array_equal(attention_weights(m, sub)[0, :, 0], [1.0])


def test_gat_one_neighbor_hand_computed():
    W = np.array([[1.0, 2.0], [-1.0, 0.5]])
    a_src, a_dst = np.array([0.2, -0.4]), np.array([0.6, 0.1])
    cfg = ScorerConfig(descriptor_dim=2, hidden_dim=2, out_dim=2, heads=1)
    m = model_with(cfg, **{"g1.W": np.eye(2), "g2.W": W, "g2.a_src": [a_src], "g2.a_dst": [a_dst]})
    h0, h1 = np.array([1.0, 0.5]), np.array([0.25, 2.0])
    sub = closure(point_graph([[h0], [h1]], [[1, 0]]), [0])
    P, h = layer_input(m, sub)
    z0, z1 = h0 @ W, h1 @ W
    e = leaky(np.array([a_src @ z0 + a_dst @ z0, a_src @ z0 + a_dst @ z1]))
    alpha = np.exp(e) / np.exp(e).sum()
    expected = alpha[0] * z0 + alpha[1] * z1
    assert np.allclose(gat_forward(m, h, sub, P).value[0], expected, atol=1e-12, rtol=0)
    assert np.allclose(gat_forward_meanvariant(m, h, sub, P).value[0], leaky(expected), atol=1e-12, rtol=0)


def test_gat_multi_head_matches_recomputation():
    rng = np.random.default_rng(7)
    H, F, Fp = 4, 3, 5
    cfg = ScorerConfig(descriptor_dim=3, hidden_dim=F, out_dim=Fp, heads=H)
    m = ScorerModel.init(cfg, 1)
    m.params["g1.W"] = np.eye(3)
    feats = rng.uniform(0.1, 1.0, size=(4, 3))
    sub = closure(point_graph([[f] for f in feats], [[1, 0], [2, 0], [3, 0]]), [0])
    P, h = layer_input(m, sub)
    W = m.params["g2.W"].reshape(F, H, Fp)
    out = np.zeros(Fp)
    for k in range(H):
        z = feats @ W[:, k, :]
        e = leaky(m.params["g2.a_src"][k] @ z[0] + z @ m.params["g2.a_dst"][k])
        alpha = np.exp(e - e.max()) / np.exp(e - e.max()).sum()
        out += alpha @ z
    assert np.allclose(gat_forward(m, h, sub, P, merge="sum").value[0], out, atol=1e-12, rtol=0)
    assert np.allclose(gat_forward(m, h, sub, P, merge="mean").value[0], leaky(out / H), atol=1e-12, rtol=0)


def test_mean_variant_identical_heads_is_half_sum():
    cfg = ScorerConfig(descriptor_dim=3, hidden_dim=3, out_dim=4, heads=2)
    m = ScorerModel.init(cfg, 2)
    W = m.params["g2.W"]
    W[:, 4:] = W[:, :4]
    m.params["g2.a_src"][1] = m.params["g2.a_src"][0]
    m.params["g2.a_dst"][1] = m.params["g2.a_dst"][0]
    g = random_graph(dim=3)
    sub = sample_subgraph(g, 0)
    P, h = layer_input(m, sub)
    s = gat_forward(m, h, sub, P, merge="sum").value
    assert np.allclose(gat_forward_meanvariant(m, h, sub, P).value, leaky(s / 2), atol=1e-12, rtol=0)


def test_sage_and_graphconv_single_node():
    cfg = ScorerConfig(descriptor_dim=2, hidden_dim=2, out_dim=2, g2="sage")
    W_self = np.array([[1.0, -2.0], [0.5, 1.0]])
    m = model_with(cfg, **{"g1.W": np.eye(2), "g2.W_self": W_self, "g2.W_nb": np.ones((2, 2))})
    sub = closure(point_graph([[[0.3, 0.8]]], []), [0])
    P, h = layer_input(m, sub)
    assert np.allclose(sageconv_forward(m, h, sub, P).value[0], leaky(np.array([0.3, 0.8]) @ W_self))

    cfg = ScorerConfig(descriptor_dim=2, hidden_dim=2, out_dim=2, g2="graphconv")
    m = model_with(cfg, **{"g1.W": np.eye(2), "g2.W": W_self})
    P, h = layer_input(m, sub)
    assert np.allclose(graphconv_forward(m, h, sub, P).value[0], leaky(np.array([0.3, 0.8]) @ W_self))


def test_sage_and_graphconv_four_nodes():
    rng = np.random.default_rng(11)
    feats = rng.uniform(0.1, 1.0, size=(4, 3))
    edges = [[1, 0], [2, 0], [3, 0], [0, 1], [2, 3]]
    g = point_graph([[f] for f in feats], edges)
    sub = closure(g, [0])
    deg = np.bincount(np.array(edges)[:, 1], minlength=4)

    cfg = ScorerConfig(descriptor_dim=3, hidden_dim=3, out_dim=4, g2="graphconv")
    m = ScorerModel.init(cfg, 4)
    m.params["g1.W"] = np.eye(3)
    P, h = layer_input(m, sub)
    agg = sum(feats[j] / np.sqrt((deg[0] + 1) * (deg[j] + 1)) for j in range(4))
    assert np.allclose(graphconv_forward(m, h, sub, P).value[0], leaky(agg @ m.params["g2.W"]), atol=1e-12, rtol=0)

    cfg = ScorerConfig(descriptor_dim=3, hidden_dim=3, out_dim=4, g2="sage")
    m = ScorerModel.init(cfg, 4)
    m.params["g1.W"] = np.eye(3)
    P, h = layer_input(m, sub)
    ref = leaky(feats[0] @ m.params["g2.W_self"] + feats[1:].mean(axis=0) @ m.params["g2.W_nb"])
    assert np.allclose(sageconv_forward(m, h, sub, P).value[0], ref, atol=1e-12, rtol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_attention_sums_to_one(seed, heads):
    g = random_graph(n_points=50, per_image=15, dim=6, k=5, seed=seed)
    cfg = ScorerConfig(descriptor_dim=6, hidden_dim=5, out_dim=4, heads=heads)
    m = ScorerModel.init(cfg, seed)
    for l in range(g.n_images):
        sub = sample_subgraph(g, l)
        alpha = attention_weights(m, sub)
        assert np.all(np.abs(alpha.sum(axis=1) - 1.0) < 1e-9)
        assert np.all(alpha[sub.slots < 0] == 0)


@pytest.mark.parametrize("g2,merge", VARIANTS)
def test_scores_in_unit_interval_and_zero_model(g2, merge, small_graph):
    cfg = ScorerConfig(descriptor_dim=8, hidden_dim=6, out_dim=4, g2=g2, head_merge=merge, heads=2)
    s = score_graph(ScorerModel.init(cfg, 0), small_graph)
    seen = small_graph.obs_count_map > 0
    assert np.all((s[seen] > 0) & (s[seen] < 1)) and np.all(s[~seen] == 0)
    z = score_graph(ScorerModel.zeros(cfg), small_graph)
    assert np.all(z[seen] == 0.5)


@pytest.mark.parametrize("g2,merge", VARIANTS)
@pytest.mark.parametrize("seed", range(5))
def test_full_loss_gradients(g2, merge, seed):
    assert full_loss_gradient_error(g2, merge, seed) < 1e-4


def test_output_bias_gradient_closed_form(small_graph):
    cfg = ScorerConfig(descriptor_dim=8, hidden_dim=6, out_dim=4)
    m = ScorerModel.init(cfg, 5)
    sub = sample_subgraph(small_graph, 1)
    tape = ad.Tape()
    s, P = forward(m, sub, tape)
    ad.backward(tape, ad.total(s))
    assert P["g3.b3"].grad[0] == pytest.approx(np.sum(s.value * (1 - s.value)), rel=1e-12)


def test_unused_parameter_has_zero_gradient(small_graph):
    # Only the first score enters the loss; with the others masked nothing else may leak in.
    cfg = ScorerConfig(descriptor_dim=8, hidden_dim=6, out_dim=4)
    m = ScorerModel.init(cfg, 5)
    sub = sample_subgraph(small_graph, 1)
    tape = ad.Tape()
    s, P = forward(m, sub, tape)
    ad.backward(tape, ad.scale(ad.total(ad.take(s, np.array([0]))), 0.0))
    for k, v in P.items():
        assert v.grad is None or not np.any(v.grad)


@pytest.mark.parametrize("g2,merge", VARIANTS)
def test_subgraph_scores_equal_full_graph(g2, merge):
    g = random_graph(n_points=80, n_images=10, per_image=20, dim=8, k=5, seed=4)
    cfg = ScorerConfig(descriptor_dim=8, hidden_dim=6, out_dim=4, g2=g2, head_merge=merge, heads=2)
    m = ScorerModel.init(cfg, 1)
    full = score_graph(m, g)
    for l in range(g.n_images):
        sub = sample_subgraph(g, l)
        assert np.array_equal(predict_scores(m, sub), full[sub.center_points])


def test_neighbor_order_does_not_change_scores():
    g = random_graph(n_points=60, per_image=20, seed=8)
    perm = np.random.default_rng(0).permutation(len(g.edges_n))
    h = g.copy(edges_n=g.edges_n[perm])
    m = ScorerModel.init(ScorerConfig(descriptor_dim=8, hidden_dim=6, out_dim=4), 2)
    assert np.array_equal(score_graph(m, g), score_graph(m, h))


def test_scores_repeatable(small_graph):
    cfg = ScorerConfig(descriptor_dim=8, hidden_dim=6, out_dim=4)
    a = score_graph(ScorerModel.init(cfg, 3), small_graph)
    b = score_graph(ScorerModel.init(cfg, 3), small_graph)
    assert a.tobytes() == b.tobytes()


def test_checkpoint_roundtrip(tmp_path):
    cfg = ScorerConfig(descriptor_dim=8, hidden_dim=6, out_dim=4, g2="sage")
    m = ScorerModel.init(cfg, 9)
    save_checkpoint(m, tmp_path / "m.bin", extra={"epoch": 3})
    back, extra = load_checkpoint(tmp_path / "m.bin")
    assert back == m and extra == {"epoch": 3}
    assert dumps_checkpoint(back, extra) == (tmp_path / "m.bin").read_bytes()
    with pytest.raises(ConfigurationError):
        loads_checkpoint(b"not a checkpoint")


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ScorerConfig(g2="gcn")
    with pytest.raises(ConfigurationError):
        ScorerModel(ScorerConfig(), {"g1.W": np.zeros((32, 64))})
    m = ScorerModel.init(ScorerConfig(descriptor_dim=4, hidden_dim=4, out_dim=4), 0)
    with pytest.raises(ConfigurationError, match="dimension"):
        score_graph(m, random_graph(dim=8))
