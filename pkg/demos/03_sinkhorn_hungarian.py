"""From a score matrix to a permutation.

Sinkhorn turns positive scores into a doubly-stochastic matrix; Hungarian
then picks the best permutation under it.
"""

import numpy as np

from permgm.assign import hungarian, log_sinkhorn, sinkhorn

m = np.array([[2.0, 1.0], [1.0, 2.0]])
print("sinkhorn([[2,1],[1,2]]):\n", sinkhorn(m, max_iters=50, tol=1e-12).data)

rng = np.random.default_rng(0)
scores = rng.normal(size=(6, 6)) / 0.2             # sharper temperatures need more rounds
log_s, stats = log_sinkhorn(scores, max_iters=200, tol=1e-6)
s = np.exp(log_s.data)
print("row sums     :", np.round(s.sum(1), 6))
print("col sums     :", np.round(s.sum(0), 6))
print("stats        :", stats)

x = hungarian(s)
print("assignment   :", x.argmax(1))
print("objective    :", (s * x).sum(), "vs diagonal", np.trace(s))

# row/column rescaling of the input does not change the result
d1, d2 = rng.uniform(0.5, 2, 6), rng.uniform(0.5, 2, 6)
m = rng.uniform(0.1, 1, (6, 6))
a = sinkhorn(m, max_iters=5000, tol=1e-13).data
b = sinkhorn(d1[:, None] * m * d2, max_iters=5000, tol=1e-13).data
print("scaling invariance, max diff:", np.abs(a - b).max())
