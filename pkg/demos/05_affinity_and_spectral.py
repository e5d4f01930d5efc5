"""Second-order affinity and spectral matching.

K scores pairs of candidate matches.  Its leading eigenvector, reshaped to
N x N, is the spectral-matching relaxation.
"""

import itertools

import numpy as np

from permgm import baselines as bl
from permgm import graphs
from permgm.assign import hungarian

# Koopmans-Beckmann and Lawler forms agree
rng = np.random.default_rng(0)
f1 = rng.uniform(0, 1, (4, 4))
f1 = f1 + f1.T
f2 = rng.uniform(0, 1, (4, 4))
f2 = f2 + f2.T
x = graphs.permutation_matrix(rng.permutation(4))
print("vec(X)' K vec(X):", bl.qap_objective(bl.kronecker_affinity(f1, f2), x))
print("tr(X' F1 X F2)  :", np.trace(x.T @ f1 @ x @ f2))

cfg = graphs.SyntheticConfig(k_pt=6, node_feature_dim=16, edge_feature_dim=16, sigma_feat=1.0)
pair = graphs.generate_synthetic_pair(cfg, rng)
k = bl.build_affinity_K(pair)
print("\nsigma (median)  :", round(k.sigma, 3))
print("nonzeros of K   :", k.nnz, "of", (pair.n ** 2) ** 2)

v, obj = bl.spectral_matching(k)
pred = hungarian(v)
print("SM accuracy     :", (pred.argmax(1) == pair.gt_indices).mean())

dense = k.dense()
best = max(bl.vec(graphs.permutation_matrix(p)) @ dense @ bl.vec(graphs.permutation_matrix(p))
           for p in itertools.permutations(range(pair.n)))
print("QAP(SM) / optimum:", round(bl.qap_objective(k, pred) / best, 4))
