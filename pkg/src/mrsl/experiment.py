"""Replicated cross-validated comparisons of Baseline, SL0 and SL.

Each replicate simulates (or loads) a dataset, computes out-of-fold raw
stage-one predictions once per base learner, and then evaluates every
requested (learner group, mode, weight scheme) cell from those shared
arrays: the Baseline cell reads the k=1 column directly, SL0 stacks the raw
columns, SL first smooths them with bandwidths selected on the same pool.
Stage-two models are refit per fold on the other folds' voxels, so every
reported prediction is out-of-fold at both stages.
"""

from __future__ import annotations

import json
import os
from collections.abc import Mapping
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from mrsl.data import load_dataset
from mrsl.learners import LearnerSpec
from mrsl.metrics import binary_report, ordinal_report
from mrsl.rng import derive_seed
from mrsl.simgen import (
    SimConfig,
    sim_config_from_dict,
    sim_config_to_dict,
    simulate_binary_dataset,
    simulate_ordinal_dataset,
)
from mrsl.smoothing import (
    DEFAULT_BANDWIDTH_GRID,
    nw_smooth,
    nw_smooth_probs,
    select_bandwidth_from_oof,
)
from mrsl.stacking import (
    MODES,
    SCHEMES,
    STAGE_ONE_OUTPUTS,
    assemble_design,
    cv_stage1,
    fit_stage2_binary,
    fit_stage2_ordinal,
    make_folds,
    ordinal_category,
)

LEARNER_NAMES = ("GLM", "QDA", "RF")


def resolve_spec(name: str, target: str, params: Mapping | None = None) -> LearnerSpec:
    """Table-style learner name to a concrete spec; GLM picks the link by target."""
    kinds = {
        "GLM": "OrderedProbit" if target == "ordinal" else "ProbitGLM",
        "QDA": "QDA",
        "RF": "RandomForest",
    }
    if name not in kinds:
        raise ValueError(f"unknown learner {name!r}; choose from {LEARNER_NAMES}")
    return LearnerSpec(kinds[name], dict(params or {}))


@dataclass(frozen=True)
class ExperimentConfig:
    """One replication study: data source, learner groups, and cells to run.

    ``learners`` is a sequence of groups; a bare name is a singleton group
    and a tuple like ("GLM", "QDA", "RF") one stacked row.  Baseline cells
    are produced only for singleton groups.  ``schemes`` applies to ordinal
    targets only.
    """

    target: str
    learners: tuple = ("GLM",)
    modes: tuple = ("Baseline", "SL0", "SL")
    schemes: tuple = ("W1",)
    K: int = 3
    V: int = 5
    grid: tuple = DEFAULT_BANDWIDTH_GRID
    R: int = 1
    seed: int = 0
    sim: SimConfig | None = None
    dataset_path: str | None = None
    stage_one_output: str = "class_probabilities"
    learner_params: Mapping = field(default_factory=dict)
    out_dir: str | None = None

    def __post_init__(self):
        if self.target not in ("binary", "ordinal"):
            raise ValueError(f"target must be binary or ordinal, got {self.target!r}")
        groups = []
        for g in self.learners:
            group = (g,) if isinstance(g, str) else tuple(g)
            if not group:
                raise ValueError("empty learner group")
            for name in group:
                if name not in LEARNER_NAMES:
                    raise ValueError(
                        f"unknown learner {name!r}; choose from {LEARNER_NAMES}")
            groups.append(group)
        if not groups:
            raise ValueError("learners must name at least one group")
        modes = tuple(self.modes)
        if not modes or any(m not in MODES for m in modes):
            raise ValueError(f"modes must be a non-empty subset of {MODES}")
        schemes = tuple(self.schemes) if self.target == "ordinal" else ("W1",)
        if not schemes or any(s not in SCHEMES for s in schemes):
            raise ValueError(f"schemes must be a non-empty subset of {SCHEMES}")
        if self.stage_one_output not in STAGE_ONE_OUTPUTS:
            raise ValueError(f"stage_one_output must be one of {STAGE_ONE_OUTPUTS}")
        if self.R < 1:
            raise ValueError("R must be >= 1")
        if self.V < 2:
            raise ValueError("V must be >= 2")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        grid = tuple(float(h) for h in self.grid)
        if not grid or any(h <= 0 for h in grid):
            raise ValueError("bandwidth grid must be positive")
        if (self.sim is None) == (self.dataset_path is None):
            raise ValueError("exactly one of sim and dataset_path must be set")
        object.__setattr__(self, "learners", tuple(groups))
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "schemes", schemes)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "learner_params",
                           {k: dict(v) for k, v in dict(self.learner_params).items()})

    def spec_names(self) -> tuple:
        seen = []
        for group in self.learners:
            for name in group:
                if name not in seen:
                    seen.append(name)
        return tuple(seen)

    def cell_keys(self) -> tuple:
        keys = []
        for group in self.learners:
            for mode in self.modes:
                if mode == "Baseline":
                    if len(group) == 1:
                        keys.append(cell_key(group, mode, None))
                    continue
                for scheme in self.schemes:
                    keys.append(cell_key(
                        group, mode, scheme if self.target == "ordinal" else None))
        return tuple(keys)


def cell_key(group, mode, scheme=None) -> str:
    label = "+".join(group) + "|" + mode
    return label if scheme is None else label + "|" + scheme


# ---------------------------------------------------------------------------
# one replicate


def _dataset_for_replicate(config: ExperimentConfig, rep_seed: int):
    if config.sim is not None:
        simulate = (simulate_ordinal_dataset if config.target == "ordinal"
                    else simulate_binary_dataset)
        return simulate(config.sim, seed=rep_seed)
    return load_dataset(config.dataset_path)


def smooth_raw(train, raw, bandwidths, K: int, target: str):
    """Per-subject smoothed copies of raw stage-one arrays."""
    out = []
    for subj, arr in zip(train.subjects, raw):
        if target == "binary":
            out.append(np.column_stack(
                [nw_smooth(arr[:, k - 1], subj.coords, bandwidths.h[k])
                 for k in range(1, K + 1)]))
        else:
            out.append(np.stack(
                [nw_smooth_probs(arr[:, k - 1, :], subj.coords, bandwidths.h[k])
                 for k in range(1, K + 1)], axis=1))
    return out


def _subject_rows(train):
    offsets = np.cumsum([0] + [s.n for s in train.subjects])
    return [np.arange(offsets[i], offsets[i + 1]) for i in range(train.N)]


def _oof_stage2_binary(design, labels, folds, rows):
    scores = np.empty(design.shape[0])
    for v in range(1, folds.V + 1):
        tr = np.concatenate([rows[i] for i in folds.train_idx(v)])
        va = np.concatenate([rows[i] for i in folds.val_idx(v)])
        model = fit_stage2_binary(design[tr], labels[tr])
        scores[va] = model.predict(design[va])
    return scores


def _oof_stage2_ordinal(design, labels, folds, rows, scheme, Z):
    cats = np.empty(design.shape[0], dtype=np.int64)
    for v in range(1, folds.V + 1):
        tr = np.concatenate([rows[i] for i in folds.train_idx(v)])
        va = np.concatenate([rows[i] for i in folds.val_idx(v)])
        model = fit_stage2_ordinal(design[tr], labels[tr], scheme=scheme, Z=Z)
        cats[va] = ordinal_category(model.predict(design[va]))
    return cats


def run_replicate(config: ExperimentConfig, rep: int) -> dict:
    """All requested cells for replicate ``rep``; every metric is out-of-fold."""
    rep_seed = derive_seed(config.seed, "rep", rep)
    train = _dataset_for_replicate(config, rep_seed)
    folds = make_folds(train.N, config.V, rep_seed)
    labels = train.pooled_labels(config.target)
    rows = _subject_rows(train)

    names = config.spec_names()
    raw = {}
    for si, name in enumerate(names):
        spec = resolve_spec(name, config.target, config.learner_params.get(name))
        raw[name], _ = cv_stage1(
            train, spec, K=config.K, V=config.V, target=config.target,
            seed=derive_seed(rep_seed, "spec", si), folds=folds)

    bandwidths, smoothed = {}, {}
    if "SL" in config.modes:
        for name in names:
            bw = select_bandwidth_from_oof(train, raw[name], config.grid,
                                           target=config.target)
            bandwidths[name] = bw
            smoothed[name] = smooth_raw(train, raw[name], bw, config.K,
                                        config.target)

    cells = {}
    for group in config.learners:
        for mode in config.modes:
            if mode == "Baseline":
                if len(group) != 1:
                    continue
                arrs = raw[group[0]]
                if config.target == "binary":
                    scores = np.concatenate([a[:, 0] for a in arrs])
                    cells[cell_key(group, mode)] = binary_report(scores, labels)
                else:
                    cats = np.concatenate(
                        [ordinal_category(a[:, 0, :]) for a in arrs])
                    cells[cell_key(group, mode)] = ordinal_report(
                        cats, labels, train.Z)
                continue
            source = raw if mode == "SL0" else smoothed
            design, _ = assemble_design(
                train, [source[n] for n in group], config.K,
                target=config.target, stage_one_output=config.stage_one_output)
            if config.target == "binary":
                scores = _oof_stage2_binary(design, labels, folds, rows)
                cells[cell_key(group, mode)] = binary_report(scores, labels)
            else:
                for scheme in config.schemes:
                    cats = _oof_stage2_ordinal(design, labels, folds, rows,
                                               scheme, train.Z)
                    cells[cell_key(group, mode, scheme)] = ordinal_report(
                        cats, labels, train.Z)

    rec = {"replicate": rep, "seed": rep_seed, "n_total": train.n_total,
           "cells": cells}
    if bandwidths:
        rec["bandwidths"] = {
            name: {str(k): bw.h[k] for k in sorted(bw.h)}
            for name, bw in bandwidths.items()
        }
    return rec


def _replicate_record(args):
    config, rep = args
    try:
        return run_replicate(config, rep)
    except Exception as exc:  # recorded; the run continues
        return {"replicate": rep, "error": f"{type(exc).__name__}: {exc}"}


def run_experiment(config: ExperimentConfig, jobs: int = 1,
                   progress=None) -> list:
    """Replicate records in index order; failures become error records."""
    tasks = [(config, rep) for rep in range(config.R)]
    records = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rec in pool.map(_replicate_record, tasks):
                records.append(rec)
                if progress is not None:
                    progress(rec)
    else:
        for task in tasks:
            rec = _replicate_record(task)
            records.append(rec)
            if progress is not None:
                progress(rec)
    return records


# ---------------------------------------------------------------------------
# aggregation


def _mean_sd(values):
    vals = np.array([np.nan if v is None else float(v) for v in values])
    ok = vals[~np.isnan(vals)]
    if ok.size == 0:
        return {"mean": None, "sd": None, "n": 0}
    return {
        "mean": float(ok.mean()),
        "sd": float(ok.std(ddof=1)) if ok.size > 1 else None,
        "n": int(ok.size),
    }


def summarize(config: ExperimentConfig, records: list) -> dict:
    """Mean (SD) across successful replicates for every cell and metric."""
    good = [r for r in records if "error" not in r]
    failures = [{"replicate": r["replicate"], "error": r["error"]}
                for r in records if "error" in r]
    cells = {}
    for key in config.cell_keys():
        per = [r["cells"][key] for r in good if key in r["cells"]]
        if config.target == "binary":
            cells[key] = {m: _mean_sd([p[m] for p in per])
                          for m in ("auc", "s80", "s90")}
        else:
            Z = len(per[0]["fpr"]) if per else 0
            entry = {"overall_error": _mean_sd([p["overall_error"] for p in per])}
            for z in range(Z):
                entry[f"fpr_{z + 1}"] = _mean_sd([p["fpr"][z] for p in per])
                entry[f"fdr_{z + 1}"] = _mean_sd([p["fdr"][z] for p in per])
            cells[key] = entry
    return {
        "target": config.target,
        "replicates": config.R,
        "completed": len(good),
        "failures": failures,
        "cells": cells,
    }


def _fmt_cell(ms) -> str:
    if ms["mean"] is None:
        return "NA"
    if ms["sd"] is None:
        return f"{ms['mean']:.3f}"
    return f"{ms['mean']:.3f} ({ms['sd']:.3f})"


def format_summary(summary: dict) -> str:
    """Plain-text table: one row per cell, mean (SD) per metric."""
    if summary["target"] == "binary":
        metrics = [("AUC", "auc"), ("S80", "s80"), ("S90", "s90")]
    else:
        keys = next(iter(summary["cells"].values()), {})
        zs = sorted({int(k.split("_")[1]) for k in keys if k.startswith("fpr_")})
        metrics = [("Error", "overall_error")]
        metrics += [(f"FPR({z})", f"fpr_{z}") for z in zs]
        metrics += [(f"FDR({z})", f"fdr_{z}") for z in zs]
    rows = [["Learner", "Method"] + [m[0] for m in metrics]]
    for key, entry in summary["cells"].items():
        parts = key.split("|")
        method = parts[1] if len(parts) == 2 else f"{parts[1]} + {parts[2]}"
        rows.append([parts[0], method] + [_fmt_cell(entry[m[1]]) for m in metrics])
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    lines = ["  ".join(r[j].ljust(widths[j]) for j in range(len(r))).rstrip()
             for r in rows]
    if summary["failures"]:
        lines.append(f"failed replicates: "
                     f"{[f['replicate'] for f in summary['failures']]}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# config (de)serialization and output files


def experiment_config_to_dict(config: ExperimentConfig) -> dict:
    return {
        "target": config.target,
        "learners": [list(g) for g in config.learners],
        "modes": list(config.modes),
        "schemes": list(config.schemes),
        "K": config.K,
        "V": config.V,
        "grid": list(config.grid),
        "R": config.R,
        "seed": config.seed,
        "sim": None if config.sim is None else sim_config_to_dict(config.sim),
        "dataset_path": config.dataset_path,
        "stage_one_output": config.stage_one_output,
        "learner_params": {k: dict(v) for k, v in config.learner_params.items()},
        "out_dir": config.out_dir,
    }


def experiment_config_from_dict(payload: Mapping) -> ExperimentConfig:
    payload = dict(payload)
    if "target" not in payload:
        raise ValueError("experiment config is missing field 'target'")
    sim = payload.get("sim")
    if sim is not None and not isinstance(sim, SimConfig):
        sim = sim_config_from_dict(sim)
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"unknown experiment config fields: {sorted(unknown)}")
    kwargs = {k: v for k, v in payload.items() if k != "sim"}
    for key in ("learners", "modes", "schemes", "grid"):
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v
                                for v in kwargs[key])
    return ExperimentConfig(sim=sim, **kwargs)


def write_experiment_outputs(out_dir: str, config: ExperimentConfig,
                             records: list, summary: dict) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "replicates": os.path.join(out_dir, "replicates.json"),
        "summary": os.path.join(out_dir, "summary.json"),
        "table": os.path.join(out_dir, "summary.txt"),
    }
    with open(paths["replicates"], "w") as fh:
        json.dump({"config": experiment_config_to_dict(config),
                   "records": records}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(paths["summary"], "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(paths["table"], "w") as fh:
        fh.write(format_summary(summary) + "\n")
    return paths
