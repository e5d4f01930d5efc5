import numpy as np
import pytest

from permgm import diffcore as dc
from permgm import embed, graphs
from permgm.graphs import MatchingPair, SyntheticConfig

SMALL_TAU = 0.05


def small_pair(n=5, dim=6, seed=0):
    cfg = SyntheticConfig(k_pt=n, node_feature_dim=dim, edge_feature_dim=0, sigma_feat=0.3)
    return graphs.generate_synthetic_pair(cfg, np.random.default_rng(seed))


def test_normalized_adjacency_isolated_node():
    adj = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]], dtype=float)
    np.testing.assert_array_equal(embed.normalized_adjacency(adj), adj)
    tri = np.ones((3, 3)) - np.eye(3)
    np.testing.assert_array_equal(embed.normalized_adjacency(tri), tri / 2)


def test_gconv_by_hand():
    layer = embed.GConvLayer("g", 2, 2, np.random.default_rng(0))
    layer.w_msg.data[:] = np.eye(2)
    layer.w_node.data[:] = 2 * np.eye(2)
    h = np.array([[1.0, -1.0], [3.0, 0.5], [0.0, 2.0]])
    adj = np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]], dtype=float)
    out = layer(adj, h).data
    relu = lambda x: np.maximum(x, 0)
    expected = np.array([
        (relu(h[1]) + relu(h[2])) / 2 + relu(2 * h[0]),
        relu(h[0]) + relu(2 * h[1]),
        relu(h[0]) + relu(2 * h[2]),
    ])
    np.testing.assert_allclose(out, expected, rtol=1e-14)


def test_gconv_isolated_node_gets_only_self_update():
    layer = embed.GConvLayer("g", 3, 4, np.random.default_rng(1))
    h = np.random.default_rng(2).normal(size=(2, 3))
    out = layer(np.zeros((2, 2)), h).data
    node = np.maximum(h @ layer.w_node.data + layer.b_node.data, 0)
    np.testing.assert_allclose(out, node, rtol=1e-14)


def test_gconv_shape_errors():
    layer = embed.GConvLayer("g", 3, 4, np.random.default_rng(1))
    with pytest.raises(ValueError, match="3-dim"):
        layer(np.zeros((2, 2)), np.zeros((2, 5)))
    with pytest.raises(ValueError, match="adjacency"):
        layer(np.zeros((3, 3)), np.zeros((2, 3)))


def test_cross_conv_identity_and_uniform():
    rng = np.random.default_rng(3)
    layer = embed.CrossConvLayer("c", 3, rng)
    h1, h2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    w, b = layer.weight.data, layer.bias.data
    o1, o2 = layer(np.eye(4), h1, h2)
    np.testing.assert_allclose(o1.data, np.concatenate([h1, h2], 1) @ w + b, rtol=1e-13)
    np.testing.assert_allclose(o2.data, np.concatenate([h2, h1], 1) @ w + b, rtol=1e-13)
    o1, _ = layer(np.full((4, 4), 0.25), h1, h2)
    mean2 = np.repeat(h2.mean(0, keepdims=True), 4, 0)
    np.testing.assert_allclose(o1.data, np.concatenate([h1, mean2], 1) @ w + b, rtol=1e-12)
    with pytest.raises(ValueError):
        layer(np.eye(3), h1, h2)


def test_affinity_identity_metric():
    m = embed.AffinityMetric("a", 3, np.random.default_rng(0), tau=0.5)
    m.A.data[:] = np.eye(3)
    h1 = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    h2 = np.array([[0, 1.0, 0], [1.0, 1.0, 0]])
    np.testing.assert_allclose(m(h1, h2).data, np.exp(np.array([[0, 1], [1, 1]]) / 0.5))
    with pytest.raises(ValueError):
        embed.AffinityMetric("a", 3, np.random.default_rng(0), tau=0)


def test_affinity_overflow_is_reported():
    m = embed.AffinityMetric("a", 2, np.random.default_rng(0))
    h = np.full((2, 2), 10.0)
    with pytest.raises(OverflowError, match="overflow"):
        m(h, h)
    assert np.all(np.isfinite(m.log_scores(h, h).data))


def test_affinity_init_is_near_identity():
    m = embed.AffinityMetric("a", 64, np.random.default_rng(0))
    off = m.A.data - np.eye(64)
    assert abs(off.std() - 0.01) < 0.002


@pytest.mark.parametrize("kind", embed.MODEL_KINDS)
def test_model_output_is_doubly_stochastic(kind):
    pair = small_pair(6, 8, seed=4)
    model = embed.build_model(kind, 8, hidden=16, iterations=2, rng=np.random.default_rng(0),
                              tau=SMALL_TAU)
    stats = []
    s = embed.model_forward(model, pair, stats=stats).data
    assert s.shape == (6, 6) and np.all(s >= 0)
    if stats[-1].converged:
        np.testing.assert_allclose(s.sum(0), 1, atol=1e-5)
        np.testing.assert_allclose(s.sum(1), 1, atol=1e-5)


def test_build_model_layouts():
    rng = np.random.default_rng(0)
    pia = embed.build_model("PIA", 4, hidden=8, rng=rng)
    pca = embed.build_model("PCA", 4, hidden=8, rng=rng)
    it = embed.build_model("PCA-iterative", 4, hidden=8, iterations=3, rng=rng)
    assert set(pia.layers) == {"gconv1", "gconv2", "gconv3", "affinity"}
    assert set(pca.layers) == {"gconv1", "affinity_hat", "cross", "gconv2", "affinity"}
    assert set(it.layers) == {"gconv1", "cross", "gconv2", "affinity"}
    assert len(pca.named_parameters()) == len(pca.parameters())
    with pytest.raises(ValueError):
        embed.build_model("GAT", 4)
    with pytest.raises(ValueError):
        embed.build_model("PCA-iterative", 4, iterations=0)


def test_iterative_single_round_skips_cross_information():
    # with S_hat = 0 the first round sees no cross-graph features
    pair = small_pair(5, 6, seed=8)
    model = embed.build_model("PCA-iterative", 6, hidden=8, rng=np.random.default_rng(1), tau=SMALL_TAU)
    s = embed.model_forward_iterative(model, pair, 1).data
    L = model.layers
    f1, f2 = embed.unit_rows(pair.g1.node_features), embed.unit_rows(pair.g2.node_features)
    w = L["cross"].weight.data[:8]
    h1 = L["gconv2"](pair.g1.adjacency, L["gconv1"](pair.g1.adjacency, f1).data @ w + L["cross"].bias.data)
    h2 = L["gconv2"](pair.g2.adjacency, L["gconv1"](pair.g2.adjacency, f2).data @ w + L["cross"].bias.data)
    log_s, _ = embed.log_sinkhorn(L["affinity"].log_scores(h1, h2), 200, 1e-6)
    np.testing.assert_allclose(s, np.exp(log_s.data), rtol=1e-10, atol=1e-14)
    assert model.iterations == 1
    with pytest.raises(ValueError):
        embed.model_forward_iterative(model, pair, 0)


def test_batched_forward_matches_single():
    pairs = [small_pair(5, 6, seed=s) for s in range(3)]
    # fixed iteration count: the stopping rule looks at the whole batch
    model = embed.build_model("PCA", 6, hidden=8, rng=np.random.default_rng(2), tau=SMALL_TAU,
                              sinkhorn=embed.SinkhornSettings(eval_iters=40, tol=0.0))
    batched = np.exp(embed.batch_forward_log(model, embed.make_batch(pairs), training=False).data)
    for b, p in enumerate(pairs):
        np.testing.assert_allclose(batched[b], embed.model_forward(model, p).data, rtol=1e-9, atol=1e-14)
    with pytest.raises(ValueError, match="node counts"):
        embed.make_batch([small_pair(5), small_pair(6)])


def relabel(pair, p1, p2):
    g1, g2 = pair.g1.permuted(p1), pair.g2.permuted(p2)
    gt = pair.gt_permutation[np.ix_(p1, p2)]
    return MatchingPair(g1, g2, gt)


@pytest.mark.parametrize("kind", embed.MODEL_KINDS)
def test_equivariance_exact(kind):
    rng = np.random.default_rng(5)
    model = embed.build_model(kind, 8, hidden=12, iterations=2, rng=rng, tau=SMALL_TAU)
    pair = small_pair(7, 8, seed=11)
    with dc.deterministic_reductions():
        s = embed.model_forward(model, pair).data
        for _ in range(5):
            p1, p2 = rng.permutation(7), rng.permutation(7)
            s2 = embed.model_forward(model, relabel(pair, p1, p2)).data
            assert s2.tobytes() == s[np.ix_(p1, p2)].tobytes()


def layer_gradcheck(fn, params):
    rep = dc.finite_diff_check(fn, params, tolerance=1e-4)
    assert rep.passed, rep


def test_gconv_gradient():
    rng = np.random.default_rng(6)
    layer = embed.GConvLayer("g", 3, 4, rng)
    layer.b_msg.data[:] = 0.1
    layer.b_node.data[:] = 0.1
    h = dc.Parameter("h", rng.normal(size=(5, 3)))
    adj = graphs.delaunay_adjacency(rng.uniform(0, 1, (5, 2)))
    w = rng.normal(size=(5, 4))
    layer_gradcheck(lambda: (layer(adj, h.tensor) * w).sum(), layer.parameters() + [h])


def test_cross_conv_gradient():
    rng = np.random.default_rng(7)
    layer = embed.CrossConvLayer("c", 3, rng)
    s = dc.Parameter("s", rng.uniform(0, 1, (4, 4)))
    h1, h2 = dc.Parameter("h1", rng.normal(size=(4, 3))), dc.Parameter("h2", rng.normal(size=(4, 3)))
    w1, w2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))

    def fn():
        a, b = layer(s.tensor, h1.tensor, h2.tensor)
        return (a * w1).sum() + (b * w2).sum()

    layer_gradcheck(fn, layer.parameters() + [s, h1, h2])


def test_affinity_gradient():
    rng = np.random.default_rng(8)
    m = embed.AffinityMetric("a", 3, rng, tau=0.5)
    h1, h2 = dc.Parameter("h1", rng.normal(size=(4, 3)) * 0.5), dc.Parameter("h2", rng.normal(size=(5, 3)) * 0.5)
    w = rng.normal(size=(4, 5))
    layer_gradcheck(lambda: (m(h1.tensor, h2.tensor) * w).sum(), m.parameters() + [h1, h2])


@pytest.mark.parametrize("kind", embed.MODEL_KINDS)
@pytest.mark.parametrize("loss", ["permutation", "offset"])
def test_full_model_gradient(kind, loss):
    from permgm import losses
    pair = small_pair(5, 6, seed=21)
    model = embed.build_model(kind, 6, hidden=4, iterations=2, rng=np.random.default_rng(3),
                              sinkhorn=embed.SinkhornSettings(train_iters=10, tol=0.0))
    ctx = losses.OffsetContext(pair.g1.coords, pair.g2.coords)

    def fn():
        log_s = embed.forward_log(model, pair.g1.node_features, pair.g2.node_features,
                                  pair.g1.adjacency, pair.g2.adjacency)
        if loss == "permutation":
            return losses.permutation_loss_from_log(log_s, pair.gt_permutation)
        return losses.offset_loss(dc.exp(log_s), ctx, pair.gt_permutation)

    layer_gradcheck(fn, model.parameters())
