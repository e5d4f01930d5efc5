"""Keypoint graphs, adjacency construction, synthetic pairs and dataset files.

Dataset files are JSON Lines, one matching pair per line::

    {"n": 3,
     "coords1": [[x, y], ...], "coords2": [[x, y], ...],
     "features1": [[...], ...], "features2": [[...], ...],
     "edges1": [[i, j], ...], "edges2": [[i, j], ...],
     "gt": [p0, p1, ...],
     "edge_features1": [[...], ...], "edge_features2": [[...], ...]}

``edges*`` list each undirected edge once with ``i < j`` in lexicographic
order; ``edge_features*`` (optional) follow the same order.  ``gt[i] = a``
means node ``i`` of graph 1 matches node ``a`` of graph 2.  A dense 0/1
matrix is also accepted for ``gt``.  Floats are written with ``repr``
precision so a save/load cycle is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, QhullError


class DegenerateGraphError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


def edge_list(adjacency):
    """Undirected edges ``(i, j)``, ``i < j``, in lexicographic order."""
    i, j = np.nonzero(np.triu(adjacency, k=1))
    return np.stack([i, j], axis=1).astype(np.int64) if i.size else np.zeros((0, 2), np.int64)


def adjacency_from_edges(n, edges):
    adj = np.zeros((n, n), dtype=np.float64)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        adj[edges[:, 0], edges[:, 1]] = 1.0
        adj[edges[:, 1], edges[:, 0]] = 1.0
    np.fill_diagonal(adj, 0.0)
    return adj


@dataclass
class KeypointGraph:
    coords: np.ndarray
    node_features: np.ndarray
    adjacency: np.ndarray
    edge_features: np.ndarray | None = None  # aligned with edge_list(adjacency)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        n = self.coords.shape[0]
        if self.node_features.ndim != 2 or self.node_features.shape[0] != n:
            raise ValueError(f"node_features must be {n} x d, got {self.node_features.shape}")
        if self.adjacency.shape != (n, n):
            raise ValueError(f"adjacency must be {n} x {n}, got {self.adjacency.shape}")
        if not np.array_equal(self.adjacency, self.adjacency.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(self.adjacency) != 0) or not np.all(np.isin(self.adjacency, (0.0, 1.0))):
            raise ValueError("adjacency must be 0/1 with zero diagonal")
        if not (np.all(np.isfinite(self.coords)) and np.all(np.isfinite(self.node_features))):
            raise ValueError("coords and node features must be finite")
        if self.edge_features is not None:
            self.edge_features = np.asarray(self.edge_features, dtype=np.float64)
            n_edges = self.edges.shape[0]
            if self.edge_features.ndim != 2 or self.edge_features.shape[0] != n_edges:
                raise ValueError(
                    f"edge_features must have one row per edge ({n_edges}), "
                    f"got {self.edge_features.shape}")

    @property
    def n(self):
        return self.coords.shape[0]

    @property
    def edges(self):
        return edge_list(self.adjacency)

    def permuted(self, order):
        """Graph whose node ``k`` is this graph's node ``order[k]``."""
        order = np.asarray(order)
        adj = self.adjacency[np.ix_(order, order)]
        ef = None
        if self.edge_features is not None:
            lookup = self.edge_feature_lookup()
            ef = np.stack([lookup[(min(order[i], order[j]), max(order[i], order[j]))]
                           for i, j in edge_list(adj)]) if adj.any() else self.edge_features[:0]
        return KeypointGraph(self.coords[order], self.node_features[order], adj, ef)

    def edge_feature_lookup(self):
        return {(int(i), int(j)): f for (i, j), f in zip(self.edges, self.edge_features)}


@dataclass
class MatchingPair:
    g1: KeypointGraph
    g2: KeypointGraph
    gt_permutation: np.ndarray

    def __post_init__(self):
        if self.g1.n != self.g2.n:
            raise ValueError(f"graphs have different node counts: {self.g1.n} vs {self.g2.n}")
        self.gt_permutation = np.asarray(self.gt_permutation, dtype=np.float64)
        check_permutation(self.gt_permutation, self.g1.n)

    @property
    def n(self):
        return self.g1.n

    @property
    def gt_indices(self):
        return np.argmax(self.gt_permutation, axis=1)


def check_permutation(x, n=None):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1] or (n is not None and x.shape[0] != n):
        raise ValueError(f"permutation matrix must be square{'' if n is None else f' {n}x{n}'}, got {x.shape}")
    if not np.all(np.isin(x, (0, 1))) or np.any(x.sum(0) != 1) or np.any(x.sum(1) != 1):
        raise ValueError("not a permutation matrix")


def permutation_matrix(indices):
    indices = np.asarray(indices, dtype=np.int64)
    n = indices.size
    x = np.zeros((n, n))
    x[np.arange(n), indices] = 1.0
    return x


# -- adjacency --------------------------------------------------------------


def delaunay_adjacency(coords):
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    n = coords.shape[0]
    if n < 3:
        raise DegenerateGraphError("degenerate point set: need at least 3 points")
    try:
        tri = Delaunay(coords)
    except QhullError:
        raise DegenerateGraphError("degenerate point set") from None
    simplices = tri.simplices
    if np.unique(simplices).size != n:
        # Qhull drops duplicated points from the triangulation
        raise DegenerateGraphError("degenerate point set: duplicated points")
    adj = np.zeros((n, n))
    for a, b in ((0, 1), (1, 2), (0, 2)):
        adj[simplices[:, a], simplices[:, b]] = 1.0
        adj[simplices[:, b], simplices[:, a]] = 1.0
    return adj


def fully_connected_adjacency(n):
    if n < 1:
        raise ValueError("fully connected graph needs N >= 1")
    return np.ones((n, n)) - np.eye(n)


# -- synthetic protocol -----------------------------------------------------


@dataclass
class SyntheticConfig:
    k_pt: int = 20
    sigma_feat: float = 1.5
    sigma_coo: float = 10.0
    node_feature_dim: int = 512
    edge_feature_dim: int = 512
    affine_rotation_range: float = 30.0      # degrees, symmetric
    affine_scale_range: tuple = (0.8, 1.25)
    affine_translation_range: float = 20.0
    shuffle: bool = True
    topology: str = "delaunay"               # or "full"
    seed: int = 0

    def __post_init__(self):
        if self.k_pt < 3:
            raise ValueError("k_pt must be >= 3")
        if self.sigma_feat < 0 or self.sigma_coo < 0:
            raise ValueError("noise levels must be non-negative")
        if self.topology not in ("delaunay", "full"):
            raise ValueError(f"unknown topology {self.topology!r}")
        self.affine_scale_range = tuple(self.affine_scale_range)


@dataclass
class LatentGraph:
    coords: np.ndarray
    node_features: np.ndarray
    pair_features: dict = field(default_factory=dict)  # (i, j), i < j -> vector


def sample_latent_graph(config, rng):
    k = config.k_pt
    coords = rng.uniform(0.0, 256.0, size=(k, 2))
    feats = rng.uniform(-1.0, 1.0, size=(k, config.node_feature_dim))
    pair_feats = {}
    if config.edge_feature_dim > 0:
        iu, ju = np.triu_indices(k, 1)
        block = rng.uniform(-1.0, 1.0, size=(iu.size, config.edge_feature_dim))
        pair_feats = {(int(i), int(j)): block[e] for e, (i, j) in enumerate(zip(iu, ju))}
    return LatentGraph(coords, feats, pair_feats)


def random_affine(config, rng):
    theta = np.deg2rad(rng.uniform(-config.affine_rotation_range, config.affine_rotation_range))
    lo, hi = config.affine_scale_range
    scale = rng.uniform(lo, hi)
    t = rng.uniform(-config.affine_translation_range, config.affine_translation_range, size=2)
    c, s = np.cos(theta), np.sin(theta)
    return scale * np.array([[c, -s], [s, c]]), t


def disturb_graph(latent, config, rng, order=None):
    """One noisy observation of ``latent``; node ``k`` is latent node ``order[k]``."""
    k = latent.coords.shape[0]
    order = np.arange(k) if order is None else np.asarray(order)
    feats = latent.node_features + rng.normal(0.0, config.sigma_feat, size=latent.node_features.shape)
    lin, t = random_affine(config, rng)
    center = np.array([128.0, 128.0])
    coords = (latent.coords - center) @ lin.T + center + t
    coords = coords + rng.normal(0.0, config.sigma_coo, size=coords.shape)
    coords, feats = coords[order], feats[order]
    if config.topology == "full":
        adj = fully_connected_adjacency(k)
    else:
        adj = delaunay_adjacency(coords)
    edge_feats = None
    if latent.pair_features:
        rows = []
        for i, j in edge_list(adj):
            a, b = sorted((int(order[i]), int(order[j])))
            rows.append(latent.pair_features[(a, b)])
        base = np.array(rows).reshape(len(rows), config.edge_feature_dim)
        edge_feats = base + rng.normal(0.0, config.sigma_feat, size=base.shape)
    return KeypointGraph(coords, feats, adj, edge_feats)


def generate_synthetic_pair(config, rng, max_retries=20):
    """Two independent disturbances of one latent graph; graph 2 is shuffled."""
    last = None
    for _ in range(max_retries):
        latent = sample_latent_graph(config, rng)
        perm = rng.permutation(config.k_pt) if config.shuffle else np.arange(config.k_pt)
        # g2 node perm[i] is latent node i
        order2 = np.argsort(perm)
        try:
            g1 = disturb_graph(latent, config, rng)
            g2 = disturb_graph(latent, config, rng, order=order2)
        except DegenerateGraphError as exc:
            last = exc
            continue
        return MatchingPair(g1, g2, permutation_matrix(perm))
    raise DegenerateGraphError(f"could not draw a non-degenerate pair in {max_retries} tries: {last}")


def generate_pairs(config, count, seed=None):
    rng = np.random.default_rng(config.seed if seed is None else seed)
    return [generate_synthetic_pair(config, rng) for _ in range(count)]


# -- dataset files ----------------------------------------------------------


def _graph_record(g, suffix):
    rec = {
        f"coords{suffix}": g.coords.tolist(),
        f"features{suffix}": g.node_features.tolist(),
        f"edges{suffix}": g.edges.tolist(),
    }
    if g.edge_features is not None:
        rec[f"edge_features{suffix}"] = g.edge_features.tolist()
    return rec


def pair_to_record(pair):
    rec = {"n": pair.n}
    rec.update(_graph_record(pair.g1, "1"))
    rec.update(_graph_record(pair.g2, "2"))
    rec["gt"] = pair.gt_indices.tolist()
    order = ["n", "coords1", "coords2", "features1", "features2", "edges1", "edges2", "gt",
             "edge_features1", "edge_features2"]
    return {k: rec[k] for k in order if k in rec}


def record_to_pair(rec, index=0):
    where = f"record {index}"
    try:
        n = int(rec["n"])
        graphs = []
        for s in ("1", "2"):
            coords = np.asarray(rec[f"coords{s}"], dtype=np.float64)
            feats = np.asarray(rec[f"features{s}"], dtype=np.float64)
            if coords.shape[0] != n or feats.shape[0] != n:
                raise DatasetFormatError(
                    f"{where}: graph {s} has {coords.shape[0]} coords / {feats.shape[0]} "
                    f"feature rows, expected n={n}")
            adj = adjacency_from_edges(n, rec[f"edges{s}"])
            ef = rec.get(f"edge_features{s}")
            graphs.append(KeypointGraph(coords, feats, adj, None if ef is None else np.asarray(ef)))
        gt = rec["gt"]
        gt_arr = np.asarray(gt)
        if gt_arr.ndim == 2:
            if gt_arr.shape != (n, n):
                raise DatasetFormatError(f"{where}: gt matrix must be {n}x{n}, got {gt_arr.shape}")
            check_permutation(gt_arr)
            gt_mat = gt_arr
        else:
            if gt_arr.shape != (n,) or sorted(gt_arr.tolist()) != list(range(n)):
                raise DatasetFormatError(f"{where}: gt must be a permutation of 0..{n - 1}")
            gt_mat = permutation_matrix(gt_arr)
        return MatchingPair(graphs[0], graphs[1], gt_mat)
    except DatasetFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{where}: {type(exc).__name__}: {exc}") from None


def save_pairs(path, pairs):
    with open(path, "w") as f:
        for pair in pairs:
            f.write(json.dumps(pair_to_record(pair)))
            f.write("\n")


def load_pairs(path):
    pairs = []
    with open(Path(path)) as f:
        for lineno, line in enumerate(f):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"record {lineno} (line {lineno + 1}): {exc}") from None
            pairs.append(record_to_pair(rec, lineno))
    return pairs
