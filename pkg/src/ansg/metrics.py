"""Pixel error, foreground-restricted Rand F-score and information-theoretic F-score.

Both partition scores are computed on raw labelings (no border thinning), so
their absolute values are not comparable to challenge leaderboards.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import UsageError


def pixel_error(prob, label, mask=None):
    """Mean absolute difference between foreground probability and a 0/1 label."""
    prob = np.asarray(prob, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if prob.shape != label.shape:
        raise UsageError(f"prob shape {prob.shape} != label shape {label.shape}")
    err = np.abs(prob - label)
    if mask is None:
        return float(err.mean())
    sel = np.asarray(mask) > 0
    if not sel.any():
        raise UsageError("evaluation mask selects no voxels")
    return float(err[sel].mean())


def _structure(ndim, connectivity):
    if connectivity == 4:
        return ndimage.generate_binary_structure(ndim, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(ndim, ndim)
    raise UsageError(f"connectivity must be 4 or 8, got {connectivity}")


def connected_components(binary, connectivity=4):
    """Label foreground regions ``1..K`` in raster order of their first pixel.

    ``4`` means face adjacency and ``8`` full (face, edge and corner)
    adjacency; for 3D input those are 6- and 26-connectivity.
    """
    binary = np.asarray(binary) > 0
    labels, _ = ndimage.label(binary, structure=_structure(binary.ndim, connectivity))
    return canonicalize(labels)


def canonicalize(labels):
    """Renumber non-zero ids to ``1..K`` by first occurrence in raster order."""
    labels = np.asarray(labels)
    ids, first, inverse = np.unique(labels.ravel(), return_index=True, return_inverse=True)
    new = np.zeros(len(ids), dtype=np.int64)
    nonzero = np.flatnonzero(ids != 0)
    ranked = nonzero[np.argsort(first[nonzero], kind="stable")]
    new[ranked] = np.arange(1, len(ranked) + 1)
    return new[inverse].reshape(labels.shape)


def _foreground_pairs(pred, gt):
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise UsageError(f"shape mismatch {pred.shape} vs {gt.shape}")
    fg = gt != 0
    if not fg.any():
        raise UsageError("ground truth has no foreground")
    return pred[fg], gt[fg]


def contingency(pred, gt):
    """Joint counts ``n_ij`` over foreground-of-gt voxels plus the marginals."""
    p, g = _foreground_pairs(pred, gt)
    _, pi = np.unique(p, return_inverse=True)
    _, gi = np.unique(g, return_inverse=True)
    table = np.zeros((pi.max() + 1, gi.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, gi), 1)
    return table, table.sum(axis=1), table.sum(axis=0)


def _pairs(n):
    return int((n * (n - 1) // 2).sum())


def rand_counts(pred, gt):
    """``(same-pred-and-same-gt pairs, same-pred pairs, same-gt pairs)`` over unordered pairs."""
    table, a, b = contingency(pred, gt)
    return _pairs(table), _pairs(a), _pairs(b)


def f_score(agree, same_pred, same_gt):
    precision = agree / same_pred if same_pred else 1.0
    recall = agree / same_gt if same_gt else 1.0
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def rand_score_foreground(pred, gt):
    """Foreground-restricted Rand F-score (V_rand) computed from the contingency table."""
    return f_score(*rand_counts(pred, gt))


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def info_score(pred, gt):
    """Mutual-information F-score ``2 I(P;G) / (H(P) + H(G))`` on ground-truth foreground (V_info)."""
    table, a, b = contingency(pred, gt)
    n = table.sum()
    hp, hg = _entropy(a, n), _entropy(b, n)
    if hp + hg == 0:
        return 1.0
    hpg = _entropy(table.ravel(), n)
    mi = hp + hg - hpg
    return float(max(0.0, 2.0 * mi / (hp + hg)))


def segment_from_prob(prob, threshold=0.5, connectivity=4):
    """Foreground components of a thresholded probability map."""
    return connected_components(np.asarray(prob) > threshold, connectivity)


def evaluate(prob, label, mask=None, connectivity=4):
    """``(pixel_error, v_rand, v_info)`` for a probability volume against a binary label volume."""
    pe = pixel_error(prob, label, mask)
    pred = segment_from_prob(prob, 0.5, connectivity)
    gt = connected_components(label, connectivity)
    if mask is not None:
        sel = np.asarray(mask) > 0
        pred, gt = pred[sel], gt[sel]
    if not np.any(gt):
        return pe, float("nan"), float("nan")
    return pe, rand_score_foreground(pred, gt), info_score(pred, gt)
