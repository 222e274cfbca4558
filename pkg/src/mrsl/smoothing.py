"""Nadaraya-Watson Gaussian-kernel smoothing of stage-one predictions,
and cross-validated bandwidth selection.

Smoothing acts within one image at a time: the smoothed value at voxel j is
the kernel-weighted average of all voxels' values (self included) with
weights exp(-||s_j - s_j'||^2 / (2 h^2)) in standardized coordinates.  As
h -> 0 the operator is the identity; as h -> infinity it collapses to the
image mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mrsl.data import Dataset

DEFAULT_BANDWIDTH_GRID = (0.02, 0.05, 0.1, 0.2, 0.4)

# one image's pairwise weights are computed in row blocks of this many
# voxels, keeping peak memory at block_size * n doubles
_BLOCK = 1024


def _check_inputs(values, coords, h):
    values = np.asarray(values, dtype=float)
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError("coords must have shape (n, 2)")
    if coords.shape[0] == 0:
        raise ValueError("empty image")
    if values.shape[0] != coords.shape[0]:
        raise ValueError("one value (row) per voxel required")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite value")
    if not (np.isfinite(h) and h > 0):
        raise ValueError("bandwidth h must be finite and > 0")
    return values, coords, float(h)


def nw_smooth(values, coords, h: float):
    """Gaussian-kernel average of ``values`` over one image's voxels.

    ``values`` may be (n,) scalars or an (n, C) matrix smoothed column-wise.
    The weight of voxel j' at voxel j is exp(-d^2/(2h^2)) with d the
    Euclidean distance of the standardized coordinates, j' = j included.
    """
    values, coords, h = _check_inputs(values, coords, h)
    flat = values.ndim == 1
    V = values[:, None] if flat else values
    n = coords.shape[0]
    out = np.empty_like(V)
    inv = -0.5 / (h * h)
    sq = np.sum(coords * coords, axis=1)
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        block = coords[start:stop]
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (block @ coords.T)
        np.maximum(d2, 0.0, out=d2)
        np.fill_diagonal(d2[:, start:stop], 0.0)  # exact self-weight 1
        W = np.exp(inv * d2)
        out[start:stop] = (W @ V) / W.sum(axis=1)[:, None]
    return out[:, 0] if flat else out


def nw_smooth_probs(P, coords, h: float):
    """Ordinal variant: smooth each class column, then renormalize rows to 1."""
    P = np.asarray(P, dtype=float)
    if P.ndim != 2:
        raise ValueError("P must be an (n, Z) probability matrix")
    out = nw_smooth(P, coords, h)
    totals = out.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        raise ValueError("smoothed probabilities sum to zero")
    return out / totals


@dataclass(frozen=True)
class BandwidthSet:
    """Selected bandwidth per resolution, plus the selection criterion."""

    h: dict  # resolution k -> bandwidth
    criterion: str  # "auc" (maximize) or "error" (minimize)

    def __post_init__(self):
        for k, v in self.h.items():
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"bandwidth for resolution {k} must be > 0")
        if self.criterion not in ("auc", "error"):
            raise ValueError(f"unknown criterion {self.criterion!r}")


def _smoothed_scores(dataset, raw_by_subject, k, h, target):
    cols = []
    for subj, raw in zip(dataset.subjects, raw_by_subject):
        if target == "binary":
            cols.append(nw_smooth(raw[:, k - 1], subj.coords, h))
        else:
            cols.append(nw_smooth_probs(raw[:, k - 1, :], subj.coords, h))
    return np.concatenate(cols)


def select_bandwidth_from_oof(dataset: Dataset, raw_by_subject, grid,
                              target: str = "binary",
                              criterion: str = None) -> BandwidthSet:
    """Pick one bandwidth per resolution from out-of-fold raw predictions.

    For each resolution independently, every candidate h smooths that
    resolution's out-of-fold predictions image by image; candidates are
    scored on the pooled voxels — AUC of the smoothed score alone (binary,
    maximized) or overall error of the smoothed vector's top category
    (ordinal, minimized).  The grid is scanned in increasing order and only
    strict improvements move the choice, so ties resolve to the smallest h.
    """
    from mrsl.metrics import roc_auc

    if criterion is None:
        criterion = "auc" if target == "binary" else "error"
    grid = sorted(set(float(h) for h in grid))
    if not grid:
        raise ValueError("bandwidth grid must be non-empty")
    if any(not (np.isfinite(h) and h > 0) for h in grid):
        raise ValueError("bandwidth candidates must be finite and > 0")
    if len(raw_by_subject) != dataset.N:
        raise ValueError("need one raw-prediction array per subject")
    K = raw_by_subject[0].shape[1]
    labels = dataset.pooled_labels(target)
    if target == "binary" and labels.min() == labels.max():
        raise ValueError(
            "bandwidth selection criterion undefined: pooled validation "
            "voxels are single-class")

    chosen = {}
    for k in range(1, K + 1):
        best_h = None
        best_score = None
        for h in grid:
            scores = _smoothed_scores(dataset, raw_by_subject, k, h, target)
            if criterion == "auc":
                val = roc_auc(scores, labels)
                better = best_score is None or val > best_score
            else:
                pred = np.argmax(scores, axis=1) + 1
                val = float(np.mean(pred != labels))
                better = best_score is None or val < best_score
            if better:
                best_h, best_score = h, val
        chosen[k] = best_h
    return BandwidthSet(h=chosen, criterion=criterion)


def select_bandwidth(train: Dataset, spec, K: int, grid=DEFAULT_BANDWIDTH_GRID,
                     folds: int = 5, target: str = "binary",
                     criterion: str = None, seed: int = 0) -> BandwidthSet:
    """Cross-validated bandwidth selection on a training dataset.

    Runs the stage-one CV to get out-of-fold raw predictions for every
    voxel, then scores the candidate grid per resolution.
    """
    from mrsl.stacking import cv_stage1  # deferred: stacking imports us

    if folds < 2:
        raise ValueError("bandwidth selection needs at least 2 folds")
    raw, _ = cv_stage1(train, spec, K=K, V=folds, target=target, seed=seed)
    return select_bandwidth_from_oof(train, raw, grid, target=target,
                                     criterion=criterion)
