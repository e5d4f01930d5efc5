"""Permutation cross-entropy, offset (displacement) loss and matching accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .graphs import check_permutation

OFFSET_EPS = 1e-8


def _check_shapes(s, s_gt):
    if s.shape != np.shape(s_gt):
        raise ValueError(f"loss: prediction {s.shape} and ground truth {np.shape(s_gt)} differ")


def permutation_loss(s, s_gt, eps=dc.EPS_LOG):
    """Binary cross-entropy summed over all N^2 entries (per pair).

    ``s`` is clamped to ``[eps, 1 - eps]`` before taking logs.  Batched input
    (B x N x N) returns the sum over pairs divided by B.
    """
    s = dc.as_tensor(s)
    _check_shapes(s, s_gt)
    gt = np.asarray(s_gt, dtype=np.float64)
    s = dc.clamp(s, eps, 1.0 - eps)
    total = -(dc.mul(gt, dc.log(s)) + dc.mul(1.0 - gt, dc.log(1.0 - s))).sum()
    return total * (1.0 / s.shape[0]) if s.ndim == 3 else total


def permutation_loss_from_log(log_s, s_gt, eps=dc.EPS_LOG):
    """Same loss, taking log S straight from a log-domain Sinkhorn.

    The ``log S`` term is used unclamped, so ground-truth entries that have
    collapsed towards zero still pass gradient.  Only ``log(1 - S)`` is
    clamped.  Equal to :func:`permutation_loss` wherever S lies in
    ``[eps, 1 - eps]``.
    """
    log_s = dc.as_tensor(log_s)
    _check_shapes(log_s, s_gt)
    gt = np.asarray(s_gt, dtype=np.float64)
    one_minus = dc.clamp(1.0 - dc.exp(log_s), lo=eps)
    total = -(dc.mul(gt, log_s) + dc.mul(1.0 - gt, dc.log(one_minus))).sum()
    return total * (1.0 / log_s.shape[0]) if log_s.ndim == 3 else total


@dataclass
class OffsetContext:
    p1: np.ndarray
    p2: np.ndarray
    epsilon: float = OFFSET_EPS
    gt_offsets: np.ndarray | None = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.p1 = np.asarray(self.p1, dtype=np.float64)
        self.p2 = np.asarray(self.p2, dtype=np.float64)


def offset_loss(s, ctx, s_gt):
    """sum_i sqrt(||d_i - d_i^gt||^2 + eps) with d_i = sum_j S_ij P2_j - P1_i."""
    s = dc.as_tensor(s)
    _check_shapes(s, s_gt)
    if ctx.p1.shape[-2] != s.shape[-2] or ctx.p2.shape[-2] != s.shape[-1]:
        raise ValueError(f"offset loss: coordinates {ctx.p1.shape} / {ctx.p2.shape} "
                         f"do not match S {s.shape}")
    d = dc.matmul(s, ctx.p2) - ctx.p1
    d_gt = ctx.gt_offsets
    if d_gt is None:
        d_gt = np.asarray(s_gt, dtype=np.float64) @ ctx.p2 - ctx.p1
    diff = d - d_gt
    total = dc.sqrt((diff * diff).sum(axis=-1) + ctx.epsilon).sum()
    return total * (1.0 / s.shape[0]) if s.ndim == 3 else total


def matching_accuracy(x_pred, x_gt):
    """Fraction of rows whose predicted match equals the ground truth."""
    x_pred, x_gt = np.asarray(x_pred), np.asarray(x_gt)
    check_permutation(x_pred)
    check_permutation(x_gt, x_pred.shape[0])
    return float(np.logical_and(x_pred == 1, x_gt == 1).sum() / x_gt.shape[0])


def symmetric_ambiguity_instance(spread=40.0):
    """Five keypoints where a soft prediction fools the offset loss.

    The middle keypoint's ground-truth partner gets probability 0.05; the rest
    is split evenly between two mirror-image neighbours whose centroid sits
    exactly on the target.  Every other row is predicted correctly.  Rows are
    stochastic, columns are not (mirrors a row-softmax prediction).

    Returns ``(S, OffsetContext, S_gt)``.
    """
    coords = np.array([[-spread, 0.0], [0.0, 0.0], [spread, 0.0],
                       [0.0, 1.5 * spread], [0.0, -1.5 * spread]])
    s_gt = np.eye(5)
    s = np.eye(5)
    s[1] = [0.475, 0.05, 0.475, 0.0, 0.0]
    return s, OffsetContext(coords, coords), s_gt
