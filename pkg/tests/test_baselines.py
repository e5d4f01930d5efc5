import itertools

import numpy as np
import pytest

from permgm import baselines as bl
from permgm import diffcore as dc
from permgm import graphs, losses
from permgm.assign import hungarian
from permgm.graphs import KeypointGraph, MatchingPair, SyntheticConfig, permutation_matrix


def gaussian_pair(n=4, seed=0, sigma_feat=0.2, dim=3):
    cfg = SyntheticConfig(k_pt=n, node_feature_dim=dim, edge_feature_dim=dim, sigma_feat=sigma_feat)
    return graphs.generate_synthetic_pair(cfg, np.random.default_rng(seed))


def dense_K_oracle(pair, sigma):
    g1, g2 = pair.g1, pair.g2
    n1, n2 = g1.n, g2.n
    l1, l2 = g1.edge_feature_lookup(), g2.edge_feature_lookup()
    k = np.zeros((n1 * n2, n1 * n2))
    for i in range(n1):
        for a in range(n2):
            d = g1.node_features[i] - g2.node_features[a]
            k[i + a * n1, i + a * n1] = np.exp(-(d @ d) / sigma ** 2)
            for j in range(n1):
                for b in range(n2):
                    if g1.adjacency[i, j] and g2.adjacency[a, b]:
                        d = l1[(min(i, j), max(i, j))] - l2[(min(a, b), max(a, b))]
                        k[i + a * n1, j + b * n1] = np.exp(-(d @ d) / sigma ** 2)
    return k


@pytest.mark.parametrize("seed", range(3))
def test_affinity_matches_double_loop(seed):
    pair = gaussian_pair(4, seed)
    k = bl.build_affinity_K(pair, sigma=1.3)
    np.testing.assert_allclose(k.dense(), dense_K_oracle(pair, 1.3), rtol=1e-12, atol=1e-15)
    dense = k.dense()
    assert np.array_equal(dense, dense.T) and dense.min() >= 0 and dense.max() <= 1


def test_affinity_identical_pair_and_single_node():
    cfg = SyntheticConfig(k_pt=5, node_feature_dim=3, edge_feature_dim=3, sigma_feat=0, sigma_coo=0,
                          shuffle=False, affine_rotation_range=0, affine_scale_range=(1, 1),
                          affine_translation_range=0)
    pair = graphs.generate_synthetic_pair(cfg, np.random.default_rng(0))
    k = bl.build_affinity_K(pair, sigma=1.0)
    for i, j in bl.directed_edges(pair.g1.adjacency):
        assert k.dense()[i + i * 5, j + j * 5] == 1.0
    g = KeypointGraph([[0.0, 0.0]], [[0.5, 2.0]], [[0]], np.zeros((0, 2)))
    np.testing.assert_array_equal(bl.build_affinity_K(MatchingPair(g, g, [[1]]), sigma=1).dense(), [[1.0]])


def test_affinity_requires_edge_features():
    g = KeypointGraph(np.eye(2), np.eye(2), [[0, 1], [1, 0]])
    with pytest.raises(ValueError, match="edge features"):
        bl.build_affinity_K(MatchingPair(g, g, np.eye(2)))


def test_median_sigma_default():
    pair = gaussian_pair(6, 1)
    k = bl.build_affinity_K(pair)
    e1, e2 = bl.directed_edges(pair.g1.adjacency), bl.directed_edges(pair.g2.adjacency)
    f1 = np.stack([pair.g1.edge_feature_lookup()[tuple(sorted(e))] for e in e1.tolist()])
    f2 = np.stack([pair.g2.edge_feature_lookup()[tuple(sorted(e))] for e in e2.tolist()])
    d2 = ((f1[:, None] - f2[None]) ** 2).sum(-1)
    assert k.sigma == pytest.approx(np.sqrt(np.median(d2)))


def test_matvec_matches_dense():
    pair = gaussian_pair(5, 2)
    k = bl.build_affinity_K(pair, 1.0)
    v = np.random.default_rng(0).normal(size=(5, 5))
    np.testing.assert_allclose(bl.vec(k.matvec(v)), k.dense() @ bl.vec(v), rtol=1e-12)
    t = k.matvec(dc.Tensor(v))
    np.testing.assert_allclose(t.data, k.matvec(v), rtol=1e-12)


def test_kronecker_examples():
    k = bl.kronecker_affinity(np.eye(3), np.eye(3))
    np.testing.assert_array_equal(k.dense(), np.eye(9))
    f1 = np.array([[0.0, 1.0], [1.0, 0.0]])
    f2 = np.array([[0.0, 2.0], [2.0, 0.0]])
    dense = bl.kronecker_affinity(f1, f2).dense()
    np.testing.assert_array_equal(dense, np.kron(f2, f1))
    # hand expansion: 2 nonzeros of F2 times 2 nonzeros of F1
    assert np.count_nonzero(dense) == 4 and set(dense[dense != 0]) == {2.0}
    with pytest.raises(ValueError, match="mismatch"):
        bl.kronecker_affinity(np.eye(2), np.eye(3))


def test_kronecker_with_node_affinity():
    rng = np.random.default_rng(3)
    f1, f2 = rng.uniform(0, 1, (3, 3)), rng.uniform(0, 1, (3, 3))
    kp = rng.uniform(0, 1, (3, 3))
    dense = bl.kronecker_affinity(f1, f2, kp).dense()
    np.testing.assert_allclose(dense, np.kron(f2, f1) + np.diag(bl.vec(kp)), rtol=1e-14)


def test_kronecker_trace_identity():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(2, 6))
        f1 = rng.uniform(0, 1, (n, n))
        f1 = f1 + f1.T
        f2 = rng.uniform(0, 1, (n, n))
        f2 = f2 + f2.T
        x = permutation_matrix(rng.permutation(n))
        lhs = bl.qap_objective(bl.kronecker_affinity(f1, f2), x)
        assert lhs == pytest.approx(np.trace(x.T @ f1 @ x @ f2), abs=1e-10)


def test_qap_objective_examples():
    k = bl.kronecker_affinity(np.eye(4), np.eye(4))
    for perm in ([0, 1, 2, 3], [3, 1, 0, 2]):
        assert bl.qap_objective(k, permutation_matrix(perm)) == 4.0


def brute_force_qap(dense, n):
    best, arg = -np.inf, None
    for p in itertools.permutations(range(n)):
        v = bl.vec(permutation_matrix(p))
        val = v @ dense @ v
        if val > best:
            best, arg = val, p
    return best, arg


def test_identity_is_optimal_on_identical_pair():
    for seed in range(3):
        pair = gaussian_pair(5, seed, sigma_feat=0.0)
        g = pair.g1
        same = MatchingPair(g, g, np.eye(5))
        k = bl.build_affinity_K(same, sigma=1.0)
        best, _ = brute_force_qap(k.dense(), 5)
        assert bl.qap_objective(k, np.eye(5)) == pytest.approx(best, rel=1e-12)


def test_qap_relabeling_invariance():
    rng = np.random.default_rng(5)
    pair = gaussian_pair(5, 6)
    x = permutation_matrix(rng.permutation(5))
    k = bl.build_affinity_K(pair, 1.0)
    p1, p2 = rng.permutation(5), rng.permutation(5)
    relabeled = MatchingPair(pair.g1.permuted(p1), pair.g2.permuted(p2), pair.gt_permutation[np.ix_(p1, p2)])
    k2 = bl.build_affinity_K(relabeled, 1.0)
    assert bl.qap_objective(k2, x[np.ix_(p1, p2)]) == pytest.approx(bl.qap_objective(k, x), rel=1e-12)


def test_spectral_identity_and_diagonal():
    v, obj = bl.spectral_matching(bl.kronecker_affinity(np.eye(3), np.eye(3)))
    np.testing.assert_allclose(v, np.full((3, 3), 1 / 3), rtol=1e-14)
    assert obj == pytest.approx(1.0)
    kp = np.ones((3, 3))
    kp[1, 2] = 5.0
    v, obj = bl.spectral_matching(bl.kronecker_affinity(np.zeros((3, 3)), np.zeros((3, 3)), kp))
    expected = np.zeros((3, 3))
    expected[1, 2] = 1.0
    np.testing.assert_allclose(v, expected, atol=1e-9)
    assert obj == pytest.approx(5.0)


def test_spectral_zero_matrix_errors():
    with pytest.raises(ValueError, match="zero"):
        bl.spectral_matching(bl.kronecker_affinity(np.zeros((2, 2)), np.zeros((2, 2))))


def test_spectral_matches_dense_eigensolver():
    rng = np.random.default_rng(6)
    for _ in range(5):
        a = rng.uniform(0, 1, (9, 9))
        k = bl.PairwiseAffinity.from_dense(a + a.T, 3, 3)
        v, obj = bl.spectral_matching(k, max_iters=5000, tol=1e-14)
        w, u = np.linalg.eigh(a + a.T)
        lead = np.abs(u[:, -1])
        np.testing.assert_allclose(bl.vec(v), lead, atol=1e-6)
        assert obj == pytest.approx(w[-1], rel=1e-9)


def test_spectral_scale_invariance():
    pair = gaussian_pair(6, 7, sigma_feat=0.5)
    k = bl.build_affinity_K(pair, 1.0)
    scaled = bl.PairwiseAffinity(k.n1, k.n2, k.edges1, k.edges2, k.edge_aff * 37.0, k.node_aff * 37.0)
    np.testing.assert_array_equal(hungarian(bl.spectral_matching(k)[0]), hungarian(bl.spectral_matching(scaled)[0]))


def test_spectral_regression_bound():
    rng = np.random.default_rng(7)
    good = 0
    for t in range(100):
        n = int(rng.integers(3, 7))
        pair = gaussian_pair(n, 1000 + t, sigma_feat=1.5, dim=16)
        k = bl.build_affinity_K(pair)
        v, _ = bl.spectral_matching(k)
        best, _ = brute_force_qap(k.dense(), n)
        good += bl.qap_objective(k, hungarian(v)) >= 0.8 * best
    assert good >= 90


def test_gmn_forward_is_doubly_stochastic():
    pair = gaussian_pair(5, 8, dim=4)
    model = bl.GmnModel(4, 4)
    stats = []
    s = bl.gmn_forward(model, pair, stats=stats).data
    assert model.kind == "GMN" and bl.GmnModel(4, 4, loss="permutation").kind == "GMN-PL"
    if stats[-1].converged:
        np.testing.assert_allclose(s.sum(0), 1, atol=1e-5)
        np.testing.assert_allclose(s.sum(1), 1, atol=1e-5)
    with pytest.raises(ValueError):
        bl.GmnModel(4, 4, loss="hinge")


def test_unrolled_sm_matches_power_iteration():
    pair = gaussian_pair(5, 9)
    k = bl.build_affinity_K(pair, 1.0)
    v = bl.spectral_matching_unrolled(k, 300).data
    ref, _ = bl.spectral_matching(k)
    np.testing.assert_allclose(v, ref, atol=1e-8)


@pytest.mark.parametrize("loss", ["offset", "permutation"])
def test_gmn_gradient(loss):
    pair = gaussian_pair(4, 10, dim=3, sigma_feat=0.3)
    rng = np.random.default_rng(11)
    model = bl.GmnModel(3, 3, loss=loss, sinkhorn_train_iters=10, tol=0.0, scale=20.0)
    model.node_logw.data[:] += rng.normal(0, 0.3, 3)
    model.edge_logw.data[:] += rng.normal(0, 0.3, 3)
    ctx = losses.OffsetContext(pair.g1.coords, pair.g2.coords)

    def fn():
        log_s = bl.gmn_forward_log(model, pair)
        if loss == "offset":
            return losses.offset_loss(dc.exp(log_s), ctx, pair.gt_permutation)
        return losses.permutation_loss_from_log(log_s, pair.gt_permutation)

    rep = dc.finite_diff_check(fn, model.parameters(), tolerance=1e-3)
    assert rep.passed, rep
