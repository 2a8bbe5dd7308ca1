"""Shared evaluation metrics: Dice (macro/micro), average surface distance,
AUC-ROC with midrank ties, and binary F1."""

from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    """Metric preconditions violated (shape mismatch, empty input, ...)."""


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")


def dice(pred_mask, true_mask, label) -> float:
    """Dice overlap 2|A∩B|/(|A|+|B|) for one label; both empty -> 1.0."""
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    _check_same_shape(pred, true)
    a = pred == label
    b = true == label
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def confusion_for_label(pred_mask, true_mask, label):
    """(intersection, |pred|, |true|) voxel counts for one label."""
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    _check_same_shape(pred, true)
    a = pred == label
    b = true == label
    return int((a & b).sum()), int(a.sum()), int(b.sum())


def dice_aggregate(per_label_counts, mode="macro") -> float:
    """Aggregate per-label (intersection, |pred|, |true|) counts.

    macro: mean of per-label dice (both-empty labels score 1.0);
    micro: dice of the pooled counts.
    """
    counts = list(per_label_counts)
    if not counts:
        raise MetricError("dice_aggregate requires at least one label")
    if mode == "macro":
        scores = []
        for inter, na, nb in counts:
            scores.append(1.0 if na + nb == 0 else 2.0 * inter / (na + nb))
        return float(np.mean(scores))
    if mode == "micro":
        inter = sum(c[0] for c in counts)
        na = sum(c[1] for c in counts)
        nb = sum(c[2] for c in counts)
        return 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)
    raise MetricError(f"unknown aggregation mode {mode!r}")


def _surface_points(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with >= 1 face-adjacent background neighbor (6-conn).

    Voxels on the array border count as surface (outside is background).
    """
    fg = mask.astype(bool)
    interior = np.ones_like(fg)
    for axis in range(3):
        lo = np.ones_like(fg)
        hi = np.ones_like(fg)
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[axis] = slice(1, None)
        sl_hi[axis] = slice(None, -1)
        lo[tuple(sl_lo)] = fg[tuple(sl_hi)]
        lo_idx = [slice(None)] * 3
        lo_idx[axis] = slice(0, 1)
        lo[tuple(lo_idx)] = False
        hi[tuple(sl_hi)] = fg[tuple(sl_lo)]
        hi_idx = [slice(None)] * 3
        hi_idx[axis] = slice(-1, None)
        hi[tuple(hi_idx)] = False
        interior &= lo & hi
    surface = fg & ~interior
    return np.argwhere(surface)


def asd(pred_mask, true_mask, spacing_mm=(1.0, 1.0, 1.0)) -> float:
    """Symmetric average surface distance in millimeters.

    Mean over both surfaces of each point's nearest-neighbor distance to the
    other surface, with voxel indices scaled by physical spacing.
    """
    pred = np.asarray(pred_mask).astype(bool)
    true = np.asarray(true_mask).astype(bool)
    _check_same_shape(pred, true)
    if not pred.any() or not true.any():
        raise MetricError("asd undefined for empty mask(s)")
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    sp = _surface_points(pred) * spacing
    st = _surface_points(true) * spacing
    d_pt = _nn_distances(sp, st)
    d_tp = _nn_distances(st, sp)
    return float((d_pt.sum() + d_tp.sum()) / (len(d_pt) + len(d_tp)))


def _nn_distances(points_a, points_b):
    """Min Euclidean distance from each point in A to the set B."""
    dists = np.empty(len(points_a))
    # Chunked to bound the pairwise matrix; masks at our scale stay small.
    chunk = 2048
    for start in range(0, len(points_a), chunk):
        block = points_a[start:start + chunk]
        diff = block[:, None, :] - points_b[None, :, :]
        dists[start:start + chunk] = np.sqrt((diff ** 2).sum(axis=2)).min(axis=1)
    return dists


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC with midrank tie handling; labels are 0/1."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricError(f"shape mismatch: {scores.shape} vs {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auc_roc requires both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum_pos = ranks[pos].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_binary(pred_labels, true_labels) -> float:
    """F1 = 2tp / (2tp + fp + fn); 0 when the denominator is 0."""
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise MetricError(f"length mismatch: {pred.shape} vs {true.shape}")
    tp = int(((pred == 1) & (true == 1)).sum())
    fp = int(((pred == 1) & (true == 0)).sum())
    fn = int(((pred == 0) & (true == 1)).sum())
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom
