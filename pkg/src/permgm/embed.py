"""Graph embedding layers, the bilinear affinity and the PIA / PCA models.

All forward functions accept a single graph (N x d features, N x N
adjacency) or a batch of equally sized graphs (B x N x d, B x N x N).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .assign import DEFAULT_TOL, EVAL_MAX_ITERS, TRAIN_MAX_ITERS, log_sinkhorn

DEFAULT_TAU = 0.005
MAX_EXPONENT = 700.0


def glorot(rng, d_in, d_out):
    a = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-a, a, size=(d_in, d_out))


def unit_rows(x):
    """L2-normalize feature rows; all-zero rows stay zero."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def normalized_adjacency(adjacency):
    """Rows divided by node degree; isolated nodes keep an all-zero row."""
    adj = np.asarray(adjacency, dtype=np.float64)
    deg = adj.sum(axis=-1, keepdims=True)
    return np.divide(adj, deg, out=np.zeros_like(adj), where=deg > 0)


class GConvLayer:
    """h_i <- mean_{j ~ i} relu(W_msg h_j + b_msg) + relu(W_node h_i + b_node)."""

    def __init__(self, name, d_in, d_out, rng):
        self.d_in, self.d_out = d_in, d_out
        self.w_msg = dc.Parameter(f"{name}.w_msg", glorot(rng, d_in, d_out))
        self.b_msg = dc.Parameter(f"{name}.b_msg", np.zeros(d_out))
        self.w_node = dc.Parameter(f"{name}.w_node", glorot(rng, d_in, d_out))
        self.b_node = dc.Parameter(f"{name}.b_node", np.zeros(d_out))

    def parameters(self):
        return [self.w_msg, self.b_msg, self.w_node, self.b_node]

    def __call__(self, adjacency, h):
        return gconv_forward(self, adjacency, h)


def gconv_forward(layer, adjacency, h):
    h = dc.as_tensor(h)
    if h.shape[-1] != layer.d_in:
        raise ValueError(f"gconv: expected {layer.d_in}-dim features, got {h.shape}")
    adj = np.asarray(adjacency.data if isinstance(adjacency, dc.Tensor) else adjacency)
    if adj.shape[-1] != h.shape[-2] or adj.shape[-2] != h.shape[-2]:
        raise ValueError(f"gconv: adjacency {adj.shape} does not match features {h.shape}")
    msg = dc.relu(h @ layer.w_msg.tensor + layer.b_msg.tensor)
    node = dc.relu(h @ layer.w_node.tensor + layer.b_node.tensor)
    return dc.matmul(normalized_adjacency(adj), msg) + node


class CrossConvLayer:
    """Concatenate own features with soft-matched features of the other graph, then FC."""

    def __init__(self, name, d, rng):
        self.d = d
        self.weight = dc.Parameter(f"{name}.weight", glorot(rng, 2 * d, d))
        self.bias = dc.Parameter(f"{name}.bias", np.zeros(d))

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, s_hat, h1, h2):
        return cross_conv_forward(self, s_hat, h1, h2)


def cross_conv_forward(layer, s_hat, h1, h2):
    """Returns ``(h1', h2')``; graph 2 aggregates through ``s_hat`` transposed."""
    s_hat, h1, h2 = dc.as_tensor(s_hat), dc.as_tensor(h1), dc.as_tensor(h2)
    if s_hat.shape[-2:] != (h1.shape[-2], h2.shape[-2]):
        raise ValueError(f"cross-conv: S_hat {s_hat.shape} does not match {h1.shape} / {h2.shape}")
    if h1.shape[-1] != layer.d or h2.shape[-1] != layer.d:
        raise ValueError(f"cross-conv: expected {layer.d}-dim features")
    m1 = dc.matmul(s_hat, h2)
    m2 = dc.matmul(dc.transpose(s_hat), h1)
    w, b = layer.weight.tensor, layer.bias.tensor
    return dc.concat([h1, m1]) @ w + b, dc.concat([h2, m2]) @ w + b


class AffinityMetric:
    """M_ij = exp(h1_i^T A h2_j / tau), handled as log-scores."""

    def __init__(self, name, d, rng, tau=DEFAULT_TAU, noise=0.01):
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.d = d
        self.tau = tau
        self.A = dc.Parameter(f"{name}.A", np.eye(d) + rng.normal(0.0, noise, size=(d, d)))

    def parameters(self):
        return [self.A]

    def log_scores(self, h1, h2):
        return affinity_log_scores(self, h1, h2)

    def __call__(self, h1, h2):
        return affinity_forward(self, h1, h2)


def affinity_log_scores(metric, h1, h2):
    h1, h2 = dc.as_tensor(h1), dc.as_tensor(h2)
    if h1.shape[-1] != metric.d or h2.shape[-1] != metric.d:
        raise ValueError(f"affinity: expected {metric.d}-dim features, got {h1.shape} / {h2.shape}")
    return (h1 @ metric.A.tensor @ dc.transpose(h2)) * (1.0 / metric.tau)


def affinity_forward(metric, h1, h2):
    """Materialized positive affinity matrix; errors when exp would overflow."""
    scores = affinity_log_scores(metric, h1, h2)
    peak = float(np.max(scores.data)) if scores.data.size else 0.0
    if peak > MAX_EXPONENT:
        raise OverflowError(f"affinity: exponent {peak:.4g} overflows; use the log-score path")
    return dc.exp(scores)


# -- models -------------------------------------------------------------------

MODEL_KINDS = ("PIA", "PCA", "PCA-iterative")


@dataclass
class SinkhornSettings:
    train_iters: int = TRAIN_MAX_ITERS
    eval_iters: int = EVAL_MAX_ITERS
    tol: float = DEFAULT_TOL

    def iters(self, training):
        return self.train_iters if training else self.eval_iters


@dataclass
class PairBatch:
    """Equally sized pairs stacked along a leading batch axis."""

    feats1: np.ndarray
    feats2: np.ndarray
    adj1: np.ndarray
    adj2: np.ndarray
    gt: np.ndarray
    coords1: np.ndarray
    coords2: np.ndarray

    @property
    def n(self):
        return self.feats1.shape[-2]

    @property
    def size(self):
        return self.feats1.shape[0]


def make_batch(pairs):
    ns = {p.n for p in pairs}
    if len(ns) != 1:
        raise ValueError(f"batch mixes node counts {sorted(ns)}")
    return PairBatch(
        np.stack([p.g1.node_features for p in pairs]),
        np.stack([p.g2.node_features for p in pairs]),
        np.stack([p.g1.adjacency for p in pairs]),
        np.stack([p.g2.adjacency for p in pairs]),
        np.stack([p.gt_permutation for p in pairs]),
        np.stack([p.g1.coords for p in pairs]),
        np.stack([p.g2.coords for p in pairs]),
    )


@dataclass
class MatchingModel:
    kind: str
    in_dim: int
    hidden: int = 2048
    tau: float = DEFAULT_TAU
    iterations: int = 1
    normalize_inputs: bool = True
    sinkhorn: SinkhornSettings = field(default_factory=SinkhornSettings)
    layers: dict = field(default_factory=dict)

    @property
    def descriptor(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "hidden": self.hidden,
                "tau": self.tau, "iterations": self.iterations,
                "normalize_inputs": self.normalize_inputs}

    def parameters(self):
        return [p for layer in self.layers.values() for p in layer.parameters()]

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}


def build_model(kind, in_dim, hidden=2048, tau=DEFAULT_TAU, iterations=1, rng=None,
                sinkhorn=None, normalize_inputs=True):
    """PIA: three GConv.  PCA: GConv, CrossConv, GConv with an extra metric for S_hat."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    if kind == "PCA-iterative" and iterations < 1:
        raise ValueError("iterative PCA needs at least one iteration")
    rng = rng if rng is not None else np.random.default_rng(0)
    model = MatchingModel(kind, in_dim, hidden, tau, iterations, normalize_inputs,
                          sinkhorn or SinkhornSettings())
    L = model.layers
    if kind == "PIA":
        L["gconv1"] = GConvLayer("gconv1", in_dim, hidden, rng)
        L["gconv2"] = GConvLayer("gconv2", hidden, hidden, rng)
        L["gconv3"] = GConvLayer("gconv3", hidden, hidden, rng)
    else:
        L["gconv1"] = GConvLayer("gconv1", in_dim, hidden, rng)
        if kind == "PCA":
            L["affinity_hat"] = AffinityMetric("affinity_hat", hidden, rng, tau)
        L["cross"] = CrossConvLayer("cross", hidden, rng)
        L["gconv2"] = GConvLayer("gconv2", hidden, hidden, rng)
    L["affinity"] = AffinityMetric("affinity", hidden, rng, tau)
    return model


def forward_log(model, feats1, feats2, adj1, adj2, training=True, stats=None):
    """Log of the predicted doubly-stochastic matrix (single or batched)."""
    L = model.layers
    iters, tol = model.sinkhorn.iters(training), model.sinkhorn.tol
    if model.normalize_inputs:
        # raw descriptors have norm ~ sqrt(d); unscaled they saturate exp(./tau)
        feats1 = unit_rows(dc.as_tensor(feats1).data)
        feats2 = unit_rows(dc.as_tensor(feats2).data)
    h1, h2 = L["gconv1"](adj1, feats1), L["gconv1"](adj2, feats2)

    def predict(a, b, metric):
        log_s, st = log_sinkhorn(metric.log_scores(a, b), iters, tol)
        if stats is not None:
            stats.append(st)
        return log_s

    if model.kind == "PIA":
        for name in ("gconv2", "gconv3"):
            h1, h2 = L[name](adj1, h1), L[name](adj2, h2)
        return predict(h1, h2, L["affinity"])
    if model.kind == "PCA":
        s_hat = dc.exp(predict(h1, h2, L["affinity_hat"]))
        h1, h2 = L["cross"](s_hat, h1, h2)
        h1, h2 = L["gconv2"](adj1, h1), L["gconv2"](adj2, h2)
        return predict(h1, h2, L["affinity"])
    # iterative variant: S_hat starts at zero and is re-predicted each round
    s_hat = dc.Tensor(np.zeros(h1.shape[:-1] + (h2.shape[-2],)))
    log_s = None
    for _ in range(model.iterations):
        c1, c2 = L["cross"](s_hat, h1, h2)
        h1, h2 = L["gconv2"](adj1, c1), L["gconv2"](adj2, c2)
        log_s = predict(h1, h2, L["affinity"])
        s_hat = dc.exp(log_s)
    return log_s


def model_forward(model, pair, training=False, stats=None):
    """Doubly-stochastic prediction S (Tensor) for one MatchingPair."""
    return dc.exp(forward_log(model, pair.g1.node_features, pair.g2.node_features,
                              pair.g1.adjacency, pair.g2.adjacency, training, stats))


def model_forward_iterative(model, pair, k, training=False, stats=None):
    if k < 1:
        raise ValueError("iteration count must be >= 1")
    if model.kind != "PCA-iterative":
        raise ValueError("model_forward_iterative needs a PCA-iterative model")
    saved = model.iterations
    model.iterations = k
    try:
        return model_forward(model, pair, training, stats)
    finally:
        model.iterations = saved


def batch_forward_log(model, batch, training=True, stats=None):
    return forward_log(model, batch.feats1, batch.feats2, batch.adj1, batch.adj2, training, stats)
