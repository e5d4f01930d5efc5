r"""Second-order affinity matrices, spectral matching and a GMN-style learner.

The affinity matrix ``K`` is indexed by candidate pairs ``(i, a)`` (node ``i``
of graph 1 with node ``a`` of graph 2) using column-major vectorization,
``idx(i, a) = i + a * n1``, so that ``vec(X)^T (F2 kron F1) vec(X)`` equals
``tr(X^T F1 X F2)`` for symmetric ``F``.

``K`` is never stored densely.  Off-diagonal mass lives in an
``E1 x E2`` table over directed edge pairs, node affinities in an
``n1 x n2`` table, and ``K @ vec(V)`` is evaluated as::

    Kp * V + G1 @ (Ke * (T1^T @ V @ T2)) @ G2^T

with ``G``/``T`` the source/target incidence matrices of each graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import diffcore as dc
from .assign import DEFAULT_TOL, TRAIN_MAX_ITERS, EVAL_MAX_ITERS, log_sinkhorn


def directed_edges(adjacency):
    i, j = np.nonzero(np.asarray(adjacency))
    return np.stack([i, j], axis=1).astype(np.int64) if i.size else np.zeros((0, 2), np.int64)


def _incidence(n, idx):
    m = np.zeros((n, idx.size))
    m[idx, np.arange(idx.size)] = 1.0
    return m


@dataclass
class PairwiseAffinity:
    n1: int
    n2: int
    edges1: np.ndarray                # directed (source, target), E1 x 2
    edges2: np.ndarray
    edge_aff: object                  # E1 x E2 ndarray or Tensor
    node_aff: object = None           # n1 x n2 ndarray or Tensor
    sigma: float | None = None
    _inc: tuple = field(default=None, repr=False)

    def incidences(self):
        if self._inc is None:
            self._inc = (_incidence(self.n1, self.edges1[:, 0]), _incidence(self.n1, self.edges1[:, 1]),
                         _incidence(self.n2, self.edges2[:, 0]), _incidence(self.n2, self.edges2[:, 1]))
        return self._inc

    def matvec(self, v):
        """``K @ vec(V)`` reshaped back to n1 x n2.  Differentiable for Tensor input."""
        g1, t1, g2, t2 = self.incidences()
        if isinstance(v, dc.Tensor) or isinstance(self.edge_aff, dc.Tensor) \
                or isinstance(self.node_aff, dc.Tensor):
            out = dc.matmul(dc.matmul(g1, dc.mul(self.edge_aff, dc.matmul(dc.matmul(t1.T, v), t2))), g2.T)
            if self.node_aff is not None:
                out = out + dc.mul(self.node_aff, v)
            return out
        v = np.asarray(v, dtype=np.float64)
        out = g1 @ (self.edge_aff * (t1.T @ v @ t2)) @ g2.T
        if self.node_aff is not None:
            out = out + self.node_aff * v
        return out

    def _numeric(self, x):
        return x.data if isinstance(x, dc.Tensor) else x

    def to_sparse(self):
        n1 = self.n1
        ke = self._numeric(self.edge_aff)
        e1, e2 = np.nonzero(ke)
        rows = self.edges1[e1, 0] + self.edges2[e2, 0] * n1
        cols = self.edges1[e1, 1] + self.edges2[e2, 1] * n1
        vals = ke[e1, e2]
        if self.node_aff is not None:
            kp = self._numeric(self.node_aff)
            i, a = np.nonzero(kp)
            rows = np.concatenate([rows, i + a * n1])
            cols = np.concatenate([cols, i + a * n1])
            vals = np.concatenate([vals, kp[i, a]])
        size = self.n1 * self.n2
        return sp.coo_matrix((vals, (rows, cols)), shape=(size, size)).tocsr()

    def dense(self):
        return self.to_sparse().toarray()

    @property
    def nnz(self):
        return self.to_sparse().nnz

    @classmethod
    def from_dense(cls, k, n1, n2):
        """Wrap an arbitrary (n1 n2) x (n1 n2) matrix using complete edge sets."""
        k = np.asarray(k, dtype=np.float64)
        if k.shape != (n1 * n2, n1 * n2):
            raise ValueError(f"dense K must be {n1 * n2} square, got {k.shape}")
        e1 = np.array([(i, j) for i in range(n1) for j in range(n1)], dtype=np.int64)
        e2 = np.array([(a, b) for a in range(n2) for b in range(n2)], dtype=np.int64)
        rows = e1[:, 0][:, None] + e2[:, 0][None, :] * n1
        cols = e1[:, 1][:, None] + e2[:, 1][None, :] * n1
        return cls(n1, n2, e1, e2, k[rows, cols])


def vec(x):
    """Column-major vectorization matching the K index convention."""
    return np.asarray(x).reshape(-1, order="F")


def unvec(v, n1, n2):
    return np.asarray(v).reshape((n1, n2), order="F")


def _sq_dists(f1, f2):
    d = (f1 * f1).sum(1)[:, None] + (f2 * f2).sum(1)[None, :] - 2.0 * f1 @ f2.T
    return np.maximum(d, 0.0)


def default_sigma(dim):
    """Kernel width scaled so each feature dimension contributes O(1/dim)."""
    return float(np.sqrt(2.0 * dim))


def median_sigma(f1, f2):
    """Median heuristic: sigma^2 is the median squared distance between rows of f1 and f2."""
    d = _sq_dists(np.asarray(f1, dtype=np.float64), np.asarray(f2, dtype=np.float64))
    med = float(np.median(d)) if d.size else 0.0
    return float(np.sqrt(med)) if med > 0 else 1.0


def build_affinity_K(pair, sigma=None):
    """Gaussian-kernel affinity on edge features (off-diagonal) and node features (diagonal).

    With ``sigma=None`` the width comes from the median heuristic over all
    cross-graph edge-feature pairs of this instance.
    """
    g1, g2 = pair.g1, pair.g2
    if g1.edge_features is None or g2.edge_features is None:
        raise ValueError("build_affinity_K: both graphs need edge features")
    e1, e2 = directed_edges(g1.adjacency), directed_edges(g2.adjacency)
    f1 = _directed_edge_features(g1, e1)
    f2 = _directed_edge_features(g2, e2)
    if sigma is None:
        sigma = median_sigma(f1, f2)
    if sigma <= 0:
        raise ValueError("kernel width must be positive")
    ke = np.exp(-_sq_dists(f1, f2) / sigma ** 2)
    kp = np.exp(-_sq_dists(g1.node_features, g2.node_features) / sigma ** 2)
    return PairwiseAffinity(g1.n, g2.n, e1, e2, ke, kp, sigma)


def _directed_edge_features(g, directed):
    lookup = g.edge_feature_lookup()
    d = g.edge_features.shape[1]
    if directed.shape[0] == 0:
        return np.zeros((0, d))
    return np.stack([lookup[(min(i, j), max(i, j))] for i, j in directed])


def kronecker_affinity(f1, f2, node_aff=None):
    """K = F2 kron F1, optionally plus node affinities on the diagonal slots."""
    f1, f2 = np.asarray(f1, dtype=np.float64), np.asarray(f2, dtype=np.float64)
    if f1.ndim != 2 or f1.shape[0] != f1.shape[1] or f2.ndim != 2 or f2.shape[0] != f2.shape[1]:
        raise ValueError("kronecker_affinity: F1 and F2 must be square")
    if f1.shape != f2.shape:
        raise ValueError(f"kronecker_affinity: size mismatch {f1.shape} vs {f2.shape}")
    e1, e2 = directed_edges(f1 != 0), directed_edges(f2 != 0)
    w1 = f1[e1[:, 0], e1[:, 1]]
    w2 = f2[e2[:, 0], e2[:, 1]]
    return PairwiseAffinity(f1.shape[0], f2.shape[0], e1, e2, np.outer(w1, w2),
                            None if node_aff is None else np.asarray(node_aff, dtype=np.float64))


def qap_objective(k, x):
    """vec(X)^T K vec(X)."""
    x = np.asarray(x, dtype=np.float64)
    return float((x * k.matvec(x)).sum())


def spectral_matching(k, max_iters=1000, tol=1e-10):
    """Leading eigenvector of K by power iteration from the uniform vector.

    Returns ``(V, objective)`` with ``V`` the unit-norm eigenvector reshaped to
    n1 x n2 and ``objective = v^T K v``.
    """
    v = np.full((k.n1, k.n2), 1.0 / np.sqrt(k.n1 * k.n2))
    for _ in range(max_iters):
        kv = k.matvec(v)
        norm = np.linalg.norm(kv)
        if norm == 0:
            raise ValueError("spectral matching: K annihilates the iterate (zero matrix?)")
        nv = kv / norm
        done = np.abs(nv - v).max() < tol
        v = nv
        if done:
            break
    return v, float((v * k.matvec(v)).sum())


def spectral_matching_unrolled(k, iters):
    """Fixed number of power iterations on the tape."""
    n = k.n1 * k.n2
    v = dc.Tensor(np.full((k.n1, k.n2), 1.0 / np.sqrt(n)))
    for _ in range(iters):
        kv = k.matvec(v)
        v = kv / dc.sqrt((kv * kv).sum())
    return v


# -- GMN-style model ----------------------------------------------------------


@dataclass
class GmnModel:
    node_dim: int
    edge_dim: int
    loss: str = "offset"            # "offset" -> GMN, "permutation" -> GMN-PL
    sm_iters: int = 10
    scale: float = 200.0            # log-scores fed to Sinkhorn are scale * V
    sinkhorn_train_iters: int = TRAIN_MAX_ITERS
    sinkhorn_eval_iters: int = EVAL_MAX_ITERS
    tol: float = DEFAULT_TOL
    node_logw: dc.Parameter = None
    edge_logw: dc.Parameter = None

    def __post_init__(self):
        if self.loss not in ("offset", "permutation"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.node_logw is None:
            init = -np.log(default_sigma(self.node_dim) ** 2)
            self.node_logw = dc.Parameter("gmn.node_logw", np.full(self.node_dim, init))
        if self.edge_logw is None:
            init = -np.log(default_sigma(self.edge_dim) ** 2)
            self.edge_logw = dc.Parameter("gmn.edge_logw", np.full(self.edge_dim, init))
        if self.node_logw.shape != (self.node_dim,) or self.edge_logw.shape != (self.edge_dim,):
            raise ValueError("GMN weight shapes do not match feature dimensions")

    @property
    def kind(self):
        return "GMN" if self.loss == "offset" else "GMN-PL"

    @property
    def descriptor(self):
        return {"kind": self.kind, "node_dim": self.node_dim, "edge_dim": self.edge_dim,
                "sm_iters": self.sm_iters, "scale": self.scale}

    def parameters(self):
        return [self.node_logw, self.edge_logw]

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}


def _weighted_gaussian(f1, f2, logw):
    """exp(-sum_d w_d (f1_d - f2_d)^2) for all row pairs, w = exp(logw)."""
    w = dc.exp(logw)
    q1 = dc.matmul(f1 * f1, dc.reshape(w, (-1, 1)))
    q2 = dc.matmul(dc.reshape(w, (1, -1)), dc.transpose(dc.as_tensor(f2 * f2)))
    cross = dc.matmul(dc.mul(f1, dc.reshape(w, (1, -1))), f2.T)
    return dc.exp(-(q1 + q2 - cross * 2.0))


def gmn_affinity(model, pair):
    g1, g2 = pair.g1, pair.g2
    if g1.edge_features is None or g2.edge_features is None:
        raise ValueError("GMN needs edge features on both graphs")
    e1, e2 = directed_edges(g1.adjacency), directed_edges(g2.adjacency)
    ke = _weighted_gaussian(_directed_edge_features(g1, e1), _directed_edge_features(g2, e2),
                            model.edge_logw.tensor)
    kp = _weighted_gaussian(g1.node_features, g2.node_features, model.node_logw.tensor)
    return PairwiseAffinity(g1.n, g2.n, e1, e2, ke, kp)


def gmn_forward_log(model, pair, training=True, stats=None):
    k = gmn_affinity(model, pair)
    v = spectral_matching_unrolled(k, model.sm_iters)
    iters = model.sinkhorn_train_iters if training else model.sinkhorn_eval_iters
    log_s, st = log_sinkhorn(v * model.scale, iters, model.tol)
    if stats is not None:
        stats.append(st)
    return log_s


def gmn_forward(model, pair, training=False, stats=None):
    return dc.exp(gmn_forward_log(model, pair, training, stats))


def sm_predict(pair, sigma=None, max_iters=1000, tol=1e-10):
    """Unlearned baseline: Gaussian K, spectral matching, soft assignment V."""
    v, _ = spectral_matching(build_affinity_K(pair, sigma), max_iters, tol)
    return v
