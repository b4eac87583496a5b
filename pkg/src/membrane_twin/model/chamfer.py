"""Chamfer distances and nearest-neighbour error maps.

Two variants are kept apart on purpose:

* :func:`chamfer_sq` is the squared-sum training objective (mm^2).
* :func:`chamfer_eval_mm` averages Euclidean nearest-neighbour distances in
  both directions and halves the sum, giving a value in mm; every reported
  metric uses it.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from .. import tensor as T


class EmptyCloudError(ValueError):
    pass


def _check(*clouds):
    out = []
    for c in clouds:
        c = np.asarray(c, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] == 0 or c.shape[1] != 3:
            raise EmptyCloudError("point clouds must be non-empty (M, 3) arrays")
        out.append(c)
    return out


def nearest(src, dst, tree=None):
    """Index into ``dst`` of the nearest neighbour of every ``src`` point."""
    tree = cKDTree(dst) if tree is None else tree
    _, idx = tree.query(src)
    return idx


def _sq_dists(src, dst, idx):
    d = src - dst[idx]
    return np.einsum("ij,ij->i", d, d)


def chamfer_sq(a, b) -> float:
    """Sum over ``a`` of squared NN distance to ``b``, plus the reverse sum."""
    a, b = _check(a, b)
    return float(_sq_dists(a, b, nearest(a, b)).sum() + _sq_dists(b, a, nearest(b, a)).sum())


def chamfer_eval_mm(gt, pr) -> float:
    gt, pr = _check(gt, pr)
    d_pr = np.sqrt(_sq_dists(pr, gt, nearest(pr, gt)))
    d_gt = np.sqrt(_sq_dists(gt, pr, nearest(gt, pr)))
    return 0.5 * (d_pr.mean() + d_gt.mean())


def nn_error_map(gt, pr):
    """Distance from each predicted point to the truth cloud, and its maximum."""
    gt, pr = _check(gt, pr)
    d = np.sqrt(_sq_dists(pr, gt, nearest(pr, gt)))
    return d, float(d.max())


def chamfer_loss(pred: T.Tensor, gt: np.ndarray, gt_trees=None) -> T.Tensor:
    """Batch mean of :func:`chamfer_sq` with gradients w.r.t. ``pred``.

    Nearest-neighbour assignments are recomputed from the current values and
    held fixed for the backward pass.
    """
    B = pred.shape[0]
    if not np.all(np.isfinite(pred.data)):
        # no neighbours exist for NaN/inf points; a NaN loss lets the caller report divergence
        return pred.sum() * math.nan
    idx_p = np.empty(pred.shape[:2], dtype=np.intp)
    idx_g = np.empty(gt.shape[:2], dtype=np.intp)
    for b in range(B):
        tree = gt_trees[b] if gt_trees is not None else cKDTree(gt[b])
        idx_p[b] = nearest(pred.data[b], gt[b], tree)
        idx_g[b] = nearest(gt[b], pred.data[b])
    rows = np.arange(B)[:, None]
    forward = T.square(pred - gt[rows, idx_p]).sum()
    backward = T.square(T.gather_points(pred, idx_g) - gt).sum()
    return (forward + backward) * (1.0 / B)
