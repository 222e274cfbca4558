"""Multi-resolution segmentation of (-1,1)^2 and per-cell base learners.

Resolution k tiles the standardized support with k x k half-open square
cells of edge 2/k, indexed x-major: l = ix*k + iy + 1.  A multi-resolution
model fits one base learner per cell per resolution k = 1..K; resolution 1
is the whole-gland baseline.  Cells whose training voxels all share one
label collapse to a constant-class fallback; cells with no training voxels
predict the global training prevalence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mrsl.data import Dataset, SubjectImage
from mrsl.learners import (
    FitError,
    FittedLearner,
    LearnerSpec,
    constant_prob_learner,
    fit_learner,
    learner_from_dict,
    learner_to_dict,
    predict_proba,
)
from mrsl.rng import derive_seed


def region_index(s, k: int):
    """Cell index l in 1..k^2 of standardized coordinate(s) at resolution k.

    Cells are half-open, [lo, hi) on each axis, with the top edge clamped
    into the last cell; voxels exactly on an interior shared edge therefore
    land deterministically in the higher cell.
    """
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    if single:
        s = s[None, :]
    if s.shape[1] != 2:
        raise ValueError("coordinates must be 2-D")
    if int(k) < 1:
        raise ValueError("resolution k must be >= 1")
    k = int(k)
    if np.any(np.abs(s) >= 1.0) or not np.all(np.isfinite(s)):
        raise ValueError("standardized coordinates must lie inside (-1, 1)^2")
    ix = np.minimum(((s[:, 0] + 1.0) * k / 2.0).astype(np.int64), k - 1)
    iy = np.minimum(((s[:, 1] + 1.0) * k / 2.0).astype(np.int64), k - 1)
    l = ix * k + iy + 1
    return int(l[0]) if single else l


def cell_bounds(k: int, l: int):
    """((x_lo, x_hi), (y_lo, y_hi)) of cell l at resolution k."""
    if not 1 <= l <= k * k:
        raise ValueError(f"cell index {l} outside 1..{k * k}")
    ix, iy = divmod(l - 1, k)
    w = 2.0 / k
    return ((-1.0 + ix * w, -1.0 + (ix + 1) * w),
            (-1.0 + iy * w, -1.0 + (iy + 1) * w))


def pool_training_arrays(dataset: Dataset, target: str,
                         subject_idx=None):
    """Stack (coords, features, labels) over the chosen subjects.

    Returns (coords (n,2), X (n,d), labels (n,), subject_of_row (n,)).
    Binary labels are c in {0,1}; ordinal labels are G in 1..Z.
    """
    if subject_idx is None:
        subject_idx = range(dataset.N)
    coords, X, y, who = [], [], [], []
    for i in subject_idx:
        subj = dataset.subjects[i]
        coords.append(subj.coords)
        X.append(subj.features)
        if target == "binary":
            lab = subj.c
        elif target == "ordinal":
            lab = subj.G
            if lab is None:
                raise ValueError(f"subject {subj.subject_id!r} has no ordinal labels")
        else:
            raise ValueError(f"unknown target {target!r}")
        y.append(lab)
        who.append(np.full(subj.n, i, dtype=np.int64))
    return (np.concatenate(coords), np.vstack(X), np.concatenate(y),
            np.concatenate(who))


@dataclass(frozen=True)
class MultiResModel:
    """Per-cell fitted learners for every resolution k = 1..K."""

    spec: LearnerSpec
    K: int
    target: str
    classes: tuple
    d: int
    learners: dict  # (k, l) -> FittedLearner

    def learner(self, k: int, l: int) -> FittedLearner:
        return self.learners[(k, l)]


def fit_multiresolution(train: Dataset, spec: LearnerSpec, K: int = 3,
                        target: str = "binary", seed: int = 0,
                        subject_idx=None) -> MultiResModel:
    """Fit spec's base learner on every cell of every resolution 1..K.

    Cell (k, l) trains on the voxels with region_index(s, k) = l, using a
    seed derived from (seed, k, l) so the fit for a given cell does not
    depend on K or on evaluation order.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    coords, X, y, _ = pool_training_arrays(train, target, subject_idx)
    if target == "binary":
        classes = (0, 1)
    else:
        classes = tuple(range(1, train.Z + 1))
    prevalence = np.array([np.mean(y == c) for c in classes])

    learners = {}
    for k in range(1, K + 1):
        cell_of = region_index(coords, k)
        for l in range(1, k * k + 1):
            mask = cell_of == l
            if not mask.any():
                learners[(k, l)] = constant_prob_learner(
                    spec, classes, X.shape[1], prevalence)
                continue
            try:
                learners[(k, l)] = fit_learner(
                    spec, X[mask], y[mask], classes=classes,
                    seed=derive_seed(seed, k, l))
            except FitError as e:
                raise FitError(f"cell (k={k}, l={l}): {e}") from e
    return MultiResModel(spec=spec, K=K, target=target, classes=classes,
                         d=X.shape[1], learners=learners)


def predict_multiresolution(model: MultiResModel, subject: SubjectImage):
    """Raw per-resolution stage-one predictions for one subject.

    Binary target: (n, K) array of P(c=1).  Ordinal target: (n, K, Z) array
    of class-probability vectors.  Each voxel is scored by the learner of
    the cell containing it at each resolution.
    """
    if subject.d != model.d:
        raise ValueError(
            f"subject has {subject.d} features, model expects {model.d}")
    n = subject.n
    if model.target == "binary":
        out = np.empty((n, model.K))
    else:
        out = np.empty((n, model.K, len(model.classes)))
    for k in range(1, model.K + 1):
        cell_of = region_index(subject.coords, k)
        for l in np.unique(cell_of):
            mask = cell_of == l
            P = predict_proba(model.learner(k, int(l)), subject.features[mask])
            if model.target == "binary":
                out[mask, k - 1] = P[:, 1]
            else:
                out[mask, k - 1, :] = P
    return out


def multires_to_dict(model: MultiResModel) -> dict:
    return {
        "kind": model.spec.kind,
        "hyperparams": dict(model.spec.hyperparams),
        "K": model.K,
        "target": model.target,
        "classes": list(model.classes),
        "d": model.d,
        "learners": {
            f"{k}:{l}": learner_to_dict(m) for (k, l), m in model.learners.items()
        },
    }


def multires_from_dict(doc: dict) -> MultiResModel:
    learners = {}
    for key, sub in doc["learners"].items():
        k, l = key.split(":")
        learners[(int(k), int(l))] = learner_from_dict(sub)
    return MultiResModel(
        spec=LearnerSpec(doc["kind"], dict(doc["hyperparams"])),
        K=int(doc["K"]),
        target=doc["target"],
        classes=tuple(doc["classes"]),
        d=int(doc["d"]),
        learners=learners,
    )
