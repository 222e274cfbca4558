"""Subject-level V-fold super learning: out-of-fold stage-one covariates,
stage-two probit / weighted ordered probit combiner, final model assembly.

Three modes:
  Baseline - the whole-gland (resolution 1) base learner alone;
  SL0      - stack raw multi-resolution out-of-fold predictions;
  SL       - smooth each resolution's predictions per image (bandwidths
             selected by CV) before stacking.

The stage-two design has one column block per base-learner spec, ordered
(spec, resolution) for the binary target and (spec, resolution, class) for
the ordinal target with class-probability covariates (classes 1..Z-1; the
last class is redundant).  All randomness is derived from one root seed via
explicit paths, so fold-parallel runs are bitwise equal to serial ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr

from mrsl.data import Dataset, SubjectImage
from mrsl.learners import (
    FitError,
    LearnerSpec,
    fit_ordered_probit,
    fit_probit,
)
from mrsl.multires import (
    fit_multiresolution,
    multires_from_dict,
    multires_to_dict,
    pool_training_arrays,
    predict_multiresolution,
)
from mrsl.rng import derive_seed, make_rng
from mrsl.smoothing import (
    DEFAULT_BANDWIDTH_GRID,
    BandwidthSet,
    nw_smooth,
    nw_smooth_probs,
    select_bandwidth_from_oof,
)

MODES = ("Baseline", "SL0", "SL")
SCHEMES = ("W1", "W2")
STAGE_ONE_OUTPUTS = ("class_probabilities", "predicted_category")


# ==================================================================== folds


@dataclass(frozen=True)
class FoldAssignment:
    """Balanced random partition of subject indices into V folds (1..V)."""

    V: int
    assignment: np.ndarray  # subject index -> fold in 1..V
    seed: int

    def train_idx(self, v: int) -> np.ndarray:
        return np.nonzero(self.assignment != v)[0]

    def val_idx(self, v: int) -> np.ndarray:
        return np.nonzero(self.assignment == v)[0]


def make_folds(N: int, V: int, seed: int = 0) -> FoldAssignment:
    """Uniformly random balanced fold assignment, deterministic in seed."""
    if not 2 <= V <= N:
        raise ValueError(f"need 2 <= V <= N, got V={V}, N={N}")
    rng = make_rng(seed, "folds")
    perm = rng.permutation(N)
    sizes = np.full(V, N // V)
    sizes[: N % V] += 1
    assignment = np.empty(N, dtype=np.int64)
    start = 0
    for v in range(V):
        assignment[perm[start:start + sizes[v]]] = v + 1
        start += sizes[v]
    assignment.flags.writeable = False
    return FoldAssignment(V=V, assignment=assignment, seed=seed)


# ================================================================== stage 1


def cv_stage1(train: Dataset, spec: LearnerSpec, K: int = 3, V: int = 5,
              target: str = "binary", seed: int = 0,
              folds: Optional[FoldAssignment] = None):
    """Out-of-fold raw stage-one predictions for every voxel.

    For each fold v, fits the multi-resolution model on the other folds'
    subjects (with a seed derived from (seed, "fold", v)) and scores fold
    v's subjects.  Returns (per-subject arrays, FoldAssignment); arrays are
    (n_i, K) of P(c=1) for the binary target, (n_i, K, Z) for ordinal.
    """
    if folds is None:
        folds = make_folds(train.N, V, seed)
    raw: list = [None] * train.N
    for v in range(1, folds.V + 1):
        tr = folds.train_idx(v)
        labels = pool_training_arrays(train, target, tr)[2]
        if np.unique(labels).size < 2:
            raise ValueError(
                f"fold {v}: training subjects carry a single class; "
                "cannot fit stage-one learners")
        model = fit_multiresolution(train, spec, K=K, target=target,
                                    seed=derive_seed(seed, "fold", v),
                                    subject_idx=tr)
        for i in folds.val_idx(v):
            raw[i] = predict_multiresolution(model, train.subjects[i])
    return raw, folds


def assemble_design(train: Dataset, raw_by_spec: Sequence, K: int,
                    target: str = "binary",
                    bandwidths: Optional[Sequence[BandwidthSet]] = None,
                    stage_one_output: str = "class_probabilities"):
    """Stack per-spec (optionally smoothed) stage-one predictions into the
    stage-two design matrix.

    Returns (design (n_tot, p), manifest) where manifest lists one
    (spec_index, k, class_or_None) per column.
    """
    blocks = []
    manifest = []
    for si, raw in enumerate(raw_by_spec):
        bw = None if bandwidths is None else bandwidths[si]
        cols = []
        for subj, arr in zip(train.subjects, raw):
            if target == "binary":
                if bw is None:
                    sm = arr
                else:
                    sm = np.column_stack(
                        [nw_smooth(arr[:, k - 1], subj.coords, bw.h[k])
                         for k in range(1, K + 1)])
                cols.append(sm)
            else:
                if bw is None:
                    sm = arr
                else:
                    sm = np.stack(
                        [nw_smooth_probs(arr[:, k - 1, :], subj.coords, bw.h[k])
                         for k in range(1, K + 1)], axis=1)
                if stage_one_output == "class_probabilities":
                    Z = sm.shape[2]
                    cols.append(sm[:, :, : Z - 1].reshape(len(sm), K * (Z - 1)))
                else:  # predicted_category as a numeric covariate
                    cols.append(np.argmax(sm, axis=2) + 1.0)
        blocks.append(np.vstack(cols))
        if target == "binary":
            manifest += [(si, k, None) for k in range(1, K + 1)]
        elif stage_one_output == "class_probabilities":
            Z = raw[0].shape[2]
            manifest += [(si, k, z) for k in range(1, K + 1)
                         for z in range(1, Z)]
        else:
            manifest += [(si, k, None) for k in range(1, K + 1)]
    return np.hstack(blocks), manifest


# ================================================================== weights


def compute_weights(labels, scheme: str, Z: Optional[int] = None) -> np.ndarray:
    """Stage-two voxel weights.

    W1: every voxel weighs 1/n.  W2: a voxel with category z weighs
    1/(m_z * Z), so each category contributes total weight 1/Z regardless
    of its prevalence.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if n == 0:
        raise ValueError("no labels")
    if Z is None:
        Z = int(labels.max())
    if np.any((labels < 1) | (labels > Z)):
        raise ValueError(f"labels must lie in 1..{Z}")
    if scheme == "W1":
        return np.full(n, 1.0 / n)
    if scheme == "W2":
        m = np.bincount(labels, minlength=Z + 1)[1:]
        if np.any(m == 0):
            absent = [z + 1 for z in range(Z) if m[z] == 0]
            raise ValueError(
                f"W2 weights undefined: categories {absent} absent (m_z = 0)")
        return 1.0 / (m[labels - 1] * Z)
    raise ValueError(f"unknown weight scheme {scheme!r}")


# ================================================================== stage 2


@dataclass(frozen=True)
class StageTwoBinary:
    """Probit combiner: P(c=1 | x) = Phi(alpha0 + alpha . x)."""

    alpha0: float
    alpha: np.ndarray

    def predict(self, design: np.ndarray) -> np.ndarray:
        return ndtr(self.alpha0 + design @ self.alpha)


@dataclass(frozen=True)
class StageTwoOrdinal:
    """Ordered probit combiner with voxel weights from ``weight_scheme``."""

    beta: np.ndarray
    cutpoints: np.ndarray
    weight_scheme: str
    Z: int

    def predict(self, design: np.ndarray) -> np.ndarray:
        eta = design @ self.beta
        cdf = np.column_stack(
            [np.zeros_like(eta)] + [ndtr(a - eta) for a in self.cutpoints]
            + [np.ones_like(eta)])
        return np.maximum(np.diff(cdf, axis=1), 0.0)


def fit_stage2_binary(design, c, lam: float = 1e-4) -> StageTwoBinary:
    c = np.asarray(c)
    if np.unique(c).size < 2:
        raise ValueError("stage-two fit needs both classes present")
    model = fit_probit(design, c, lam=lam)
    return StageTwoBinary(alpha0=model.params["beta0"],
                          alpha=model.params["beta"])


def fit_stage2_ordinal(design, G, scheme: str = "W1", Z: Optional[int] = None,
                       lam: float = 1e-4) -> StageTwoOrdinal:
    G = np.asarray(G, dtype=np.int64)
    if Z is None:
        Z = int(G.max())
    if np.unique(G).size < 2:
        raise ValueError("stage-two fit needs at least two categories")
    w = compute_weights(G, scheme, Z=Z)
    model = fit_ordered_probit(design, G, weights=w, lam=lam, Z=Z)
    return StageTwoOrdinal(beta=model.params["beta"],
                           cutpoints=model.params["cutpoints"],
                           weight_scheme=scheme, Z=Z)


def ordinal_category(probs: np.ndarray) -> np.ndarray:
    """Top category of each probability row; ties resolve to the lower one."""
    return np.argmax(probs, axis=-1) + 1


# ============================================================= super learner


@dataclass(frozen=True)
class SuperLearnerConfig:
    specs: tuple
    K: int = 3
    V: int = 5
    mode: str = "SL"
    target: str = "binary"
    scheme: str = "W1"
    grid: tuple = DEFAULT_BANDWIDTH_GRID
    stage_one_output: str = "class_probabilities"
    lam2: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        object.__setattr__(self, "grid", tuple(float(h) for h in self.grid))
        if not self.specs:
            raise ValueError("at least one base-learner spec required")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.target not in ("binary", "ordinal"):
            raise ValueError("target must be binary or ordinal")
        if self.scheme not in SCHEMES:
            raise ValueError(f"weight scheme must be one of {SCHEMES}")
        if self.stage_one_output not in STAGE_ONE_OUTPUTS:
            raise ValueError(
                f"stage_one_output must be one of {STAGE_ONE_OUTPUTS}")
        if self.K < 1 or self.V < 2:
            raise ValueError("need K >= 1 and V >= 2")
        if self.mode == "Baseline" and len(self.specs) != 1:
            raise ValueError("Baseline mode uses exactly one base learner")
        for spec in self.specs:
            if self.target == "binary" and spec.kind == "OrderedProbit":
                raise ValueError("OrderedProbit is an ordinal-target learner")
            if self.target == "ordinal" and spec.kind == "ProbitGLM":
                raise ValueError(
                    "ProbitGLM is binary-only; use OrderedProbit for ordinal")


@dataclass(frozen=True)
class SuperLearnerModel:
    config: SuperLearnerConfig
    seed: int
    Z: int
    stage_one: tuple  # one MultiResModel per spec (refit on all of train)
    bandwidths: Optional[tuple]  # one BandwidthSet per spec (SL mode only)
    stage_two: Optional[object]  # StageTwoBinary | StageTwoOrdinal
    manifest: tuple  # (spec_index, k, class_or_None) per design column
    fold_report: tuple  # per-fold stage-two coefficient summaries


def train_superlearner(train: Dataset, config: SuperLearnerConfig,
                       seed: int = 0) -> SuperLearnerModel:
    """Train a Baseline / SL0 / SL model on ``train``.

    SL0/SL: run subject-level V-fold CV to build out-of-fold stage-one
    covariates (smoothed, with CV-selected bandwidths, in SL mode), fit the
    stage-two combiner on them, then refit stage-one on all subjects.  The
    stage-two fit from CV is kept as-is for the final model.
    """
    if config.target == "ordinal" and not train.has_ordinal():
        raise ValueError("ordinal target needs ordinal labels on every subject")
    Z = train.Z if config.target == "ordinal" else 2
    mode = config.mode

    K_eff = 1 if mode == "Baseline" else config.K
    refit = tuple(
        fit_multiresolution(
            train, spec, K=K_eff, target=config.target,
            seed=derive_seed(derive_seed(seed, "spec", si), "refit"))
        for si, spec in enumerate(config.specs))

    if mode == "Baseline":
        return SuperLearnerModel(
            config=config, seed=seed, Z=Z, stage_one=refit, bandwidths=None,
            stage_two=None, manifest=((0, 1, None),), fold_report=())

    folds = make_folds(train.N, config.V, seed)
    raw_by_spec = []
    for si, spec in enumerate(config.specs):
        raw, _ = cv_stage1(train, spec, K=config.K, target=config.target,
                           seed=derive_seed(seed, "spec", si), folds=folds)
        raw_by_spec.append(raw)

    bandwidths = None
    if mode == "SL":
        bandwidths = tuple(
            select_bandwidth_from_oof(train, raw, config.grid,
                                      target=config.target)
            for raw in raw_by_spec)

    design, manifest = assemble_design(
        train, raw_by_spec, K=config.K, target=config.target,
        bandwidths=bandwidths, stage_one_output=config.stage_one_output)
    labels = train.pooled_labels(config.target)

    if config.target == "binary":
        stage_two = fit_stage2_binary(design, labels, lam=config.lam2)
    else:
        stage_two = fit_stage2_ordinal(design, labels, scheme=config.scheme,
                                       Z=Z, lam=config.lam2)

    subj_of_row = np.repeat(np.arange(train.N),
                            [s.n for s in train.subjects])
    fold_report = []
    for v in range(1, folds.V + 1):
        rows = np.isin(subj_of_row, folds.val_idx(v))
        try:
            if config.target == "binary":
                st = fit_stage2_binary(design[rows], labels[rows],
                                       lam=config.lam2)
                fold_report.append({"fold": v, "alpha0": st.alpha0,
                                    "alpha": [float(a) for a in st.alpha]})
            else:
                st = fit_stage2_ordinal(design[rows], labels[rows],
                                        scheme=config.scheme, Z=Z,
                                        lam=config.lam2)
                fold_report.append({
                    "fold": v, "beta": [float(b) for b in st.beta],
                    "cutpoints": [float(a) for a in st.cutpoints]})
        except (ValueError, FitError) as e:
            fold_report.append({"fold": v, "error": str(e)})

    return SuperLearnerModel(
        config=config, seed=seed, Z=Z, stage_one=refit,
        bandwidths=bandwidths, stage_two=stage_two,
        manifest=tuple(manifest), fold_report=tuple(fold_report))


def _stage_one_design(model: SuperLearnerModel, subject: SubjectImage):
    config = model.config
    blocks = []
    for si, m1 in enumerate(model.stage_one):
        arr = predict_multiresolution(m1, subject)
        bw = None if model.bandwidths is None else model.bandwidths[si]
        if config.target == "binary":
            if bw is not None:
                arr = np.column_stack(
                    [nw_smooth(arr[:, k - 1], subject.coords, bw.h[k])
                     for k in range(1, m1.K + 1)])
            blocks.append(arr)
        else:
            if bw is not None:
                arr = np.stack(
                    [nw_smooth_probs(arr[:, k - 1, :], subject.coords, bw.h[k])
                     for k in range(1, m1.K + 1)], axis=1)
            if config.stage_one_output == "class_probabilities":
                Zc = arr.shape[2]
                blocks.append(arr[:, :, : Zc - 1].reshape(len(arr), -1))
            else:
                blocks.append(np.argmax(arr, axis=2) + 1.0)
    return np.hstack(blocks)


def predict_superlearner(model: SuperLearnerModel, subject: SubjectImage):
    """Voxel-wise predictions for one subject.

    Binary target: (n,) array of P(c=1).  Ordinal target: ((n, Z)
    probability matrix, (n,) predicted categories).
    """
    config = model.config
    if config.mode == "Baseline":
        arr = predict_multiresolution(model.stage_one[0], subject)
        if config.target == "binary":
            return arr[:, 0]
        probs = arr[:, 0, :]
        return probs, ordinal_category(probs)
    design = _stage_one_design(model, subject)
    if config.target == "binary":
        return model.stage_two.predict(design)
    probs = model.stage_two.predict(design)
    return probs, ordinal_category(probs)


# =========================================================== serialization


def _spec_doc(spec: LearnerSpec) -> dict:
    return {"kind": spec.kind, "hyperparams": dict(spec.hyperparams)}


def superlearner_to_dict(model: SuperLearnerModel) -> dict:
    cfg = model.config
    doc = {
        "schema": "mrsl-superlearner-v1",
        "config": {
            "specs": [_spec_doc(s) for s in cfg.specs],
            "K": cfg.K, "V": cfg.V, "mode": cfg.mode, "target": cfg.target,
            "scheme": cfg.scheme, "grid": list(cfg.grid),
            "stage_one_output": cfg.stage_one_output, "lam2": cfg.lam2,
        },
        "seed": model.seed,
        "Z": model.Z,
        "manifest": [list(m) for m in model.manifest],
        "fold_report": [dict(r) for r in model.fold_report],
        "stage_one": [multires_to_dict(m) for m in model.stage_one],
        "bandwidths": None if model.bandwidths is None else [
            {"h": {str(k): v for k, v in bw.h.items()},
             "criterion": bw.criterion}
            for bw in model.bandwidths
        ],
    }
    st = model.stage_two
    if st is None:
        doc["stage_two"] = None
    elif isinstance(st, StageTwoBinary):
        doc["stage_two"] = {"type": "binary", "alpha0": st.alpha0,
                            "alpha": [float(a) for a in st.alpha]}
    else:
        doc["stage_two"] = {
            "type": "ordinal", "beta": [float(b) for b in st.beta],
            "cutpoints": [float(a) for a in st.cutpoints],
            "weight_scheme": st.weight_scheme, "Z": st.Z,
        }
    return doc


def superlearner_from_dict(doc: dict) -> SuperLearnerModel:
    if doc.get("schema") != "mrsl-superlearner-v1":
        raise ValueError(f"unrecognized model schema: {doc.get('schema')!r}")
    c = doc["config"]
    config = SuperLearnerConfig(
        specs=tuple(LearnerSpec(s["kind"], dict(s["hyperparams"]))
                    for s in c["specs"]),
        K=int(c["K"]), V=int(c["V"]), mode=c["mode"], target=c["target"],
        scheme=c["scheme"], grid=tuple(c["grid"]),
        stage_one_output=c["stage_one_output"], lam2=float(c["lam2"]),
    )
    st_doc = doc["stage_two"]
    if st_doc is None:
        stage_two = None
    elif st_doc["type"] == "binary":
        stage_two = StageTwoBinary(
            alpha0=float(st_doc["alpha0"]),
            alpha=np.array(st_doc["alpha"], dtype=float))
    else:
        stage_two = StageTwoOrdinal(
            beta=np.array(st_doc["beta"], dtype=float),
            cutpoints=np.array(st_doc["cutpoints"], dtype=float),
            weight_scheme=st_doc["weight_scheme"], Z=int(st_doc["Z"]))
    bandwidths = None
    if doc["bandwidths"] is not None:
        bandwidths = tuple(
            BandwidthSet(h={int(k): float(v) for k, v in b["h"].items()},
                         criterion=b["criterion"])
            for b in doc["bandwidths"])
    return SuperLearnerModel(
        config=config, seed=int(doc["seed"]), Z=int(doc["Z"]),
        stage_one=tuple(multires_from_dict(m) for m in doc["stage_one"]),
        bandwidths=bandwidths, stage_two=stage_two,
        manifest=tuple(tuple(m) for m in doc["manifest"]),
        fold_report=tuple(doc["fold_report"]),
    )
