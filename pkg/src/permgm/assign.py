"""Sinkhorn normalization (log domain, differentiable) and Hungarian assignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

TRAIN_MAX_ITERS = 20
EVAL_MAX_ITERS = 200
DEFAULT_TOL = 1e-6


@dataclass
class SinkhornStats:
    iterations: int
    deviation: float
    converged: bool


@dataclass
class SimilarityMatrix:
    """N x N score matrix kept as log-values; ``stage`` is 'raw' or 'doubly-stochastic'."""

    log_values: dc.Tensor
    stage: str = "raw"
    stats: SinkhornStats | None = None

    @property
    def values(self):
        return dc.exp(self.log_values)


def _deviation(log_s):
    s = np.exp(log_s)
    return max(np.abs(s.sum(axis=-1) - 1.0).max(), np.abs(s.sum(axis=-2) - 1.0).max())


def log_sinkhorn(log_scores, max_iters=TRAIN_MAX_ITERS, tol=DEFAULT_TOL):
    """Sinkhorn on ``exp(log_scores)`` carried out entirely on log-values.

    One iteration is a row normalization followed by a column normalization,
    each a log-sum-exp subtraction.  Works on a single N x N matrix or a
    batch B x N x N.  Stops once every row and column sum is within ``tol``
    of one (``tol <= 0`` runs exactly ``max_iters`` iterations).

    Returns ``(log_S, SinkhornStats)``; ``log_S`` stays on the tape.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    x = dc.as_tensor(log_scores)
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ValueError(f"sinkhorn: square matrix expected, got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise ValueError("sinkhorn: non-positive input (non-finite log-scores)")
    dev = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        x = x - dc.logsumexp(x, axis=-1)
        x = x - dc.logsumexp(x, axis=-2)
        dev = _deviation(x.data)
        if tol > 0 and dev < tol:
            break
    return x, SinkhornStats(it, float(dev), bool(dev < tol))


def sinkhorn(m, max_iters=TRAIN_MAX_ITERS, tol=DEFAULT_TOL):
    """Doubly-stochastic scaling of a positive matrix ``m``.

    Accepts an ndarray or Tensor; returns a Tensor.  A row or column of
    zeros cannot be scaled and raises ``ValueError``.
    """
    m = dc.as_tensor(m)
    d = m.data
    if np.any(d < 0) or np.any(~d.any(axis=-1)) or np.any(~d.any(axis=-2)):
        raise ValueError("sinkhorn: non-positive input")
    if np.any(d <= 0):
        raise ValueError("sinkhorn: non-positive input (zero entries)")
    log_s, _ = log_sinkhorn(dc.log(m), max_iters, tol)
    return dc.exp(log_s)


def sinkhorn_similarity(sim: SimilarityMatrix, max_iters=TRAIN_MAX_ITERS, tol=DEFAULT_TOL):
    log_s, stats = log_sinkhorn(sim.log_values, max_iters, tol)
    return SimilarityMatrix(log_s, "doubly-stochastic", stats)


# -- Hungarian ----------------------------------------------------------------


def _assign_min_cost(cost):
    """Shortest-augmenting-path Kuhn-Munkres with potentials, O(n^3).

    Rows are inserted in increasing order and the entering column is the
    lowest-index one among equal reduced costs, so ties resolve to the lowest
    row, then the lowest column.
    """
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) assigned to column j
    way = np.zeros(n + 1, dtype=np.int64)
    c = np.zeros((n + 1, n + 1))
    c[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = c[i0, 1:] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assignment = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        assignment[p[j] - 1] = j - 1
    return assignment


def hungarian_indices(s):
    """``a[i]`` = column assigned to row ``i`` maximizing ``sum S[i, a[i]]``."""
    s = np.asarray(s.data if isinstance(s, dc.Tensor) else s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"hungarian: square matrix expected, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("hungarian: non-finite entries")
    if s.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    # shift so the cost is non-negative; does not change the argmax
    return _assign_min_cost(s.max() - s)


def hungarian(s):
    """Permutation matrix maximizing ``sum(S * X)``."""
    idx = hungarian_indices(s)
    x = np.zeros((idx.size, idx.size))
    x[np.arange(idx.size), idx] = 1.0
    return x
