"""Command-line driver.

Subcommands: simulate (write a synthetic dataset), train / predict /
evaluate (single-model workflow), experiment (replicated Baseline/SL0/SL
comparison tables), bandwidth (report CV-selected smoothing bandwidths).
Configs are TOML or JSON; flags override config fields.  Validation
problems exit with status 2 and a message naming the offending field;
progress goes to stderr, machine output to files or stdout.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from mrsl import __version__
from mrsl.data import (
    ColumnSchema,
    ParseError,
    SchemaError,
    load_dataset_csv,
    load_dataset_json,
    save_dataset_csv,
    save_dataset_json,
)
from mrsl.experiment import (
    experiment_config_from_dict,
    experiment_config_to_dict,
    format_summary,
    resolve_spec,
    run_experiment,
    summarize,
    write_experiment_outputs,
)
from mrsl.learners import FitError, LearnerSpec
from mrsl.metrics import (
    binary_report,
    format_binary_report,
    format_ordinal_report,
    ordinal_report,
)
from mrsl.simgen import (
    sim_config_from_dict,
    sim_config_to_dict,
    simulate_binary_dataset,
    simulate_ordinal_dataset,
)
from mrsl.smoothing import DEFAULT_BANDWIDTH_GRID, select_bandwidth
from mrsl.stacking import (
    SuperLearnerConfig,
    predict_superlearner,
    superlearner_from_dict,
    superlearner_to_dict,
    train_superlearner,
)

JOBS_ENV = "MRSL_JOBS"

_LABEL_COLUMNS = ("c", "G", "gleason_primary", "gleason_secondary")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def load_config_file(path: str) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if path.endswith(".toml"):
        return tomllib.loads(blob.decode("utf-8"))
    if path.endswith(".json"):
        return json.loads(blob)
    try:
        return json.loads(blob)
    except json.JSONDecodeError:
        try:
            return tomllib.loads(blob.decode("utf-8"))
        except tomllib.TOMLDecodeError:
            raise ValueError(f"{path}: neither valid JSON nor valid TOML")


def config_digest(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _write_provenance(near_path: str, command: str, payload: dict, seed) -> str:
    """Sidecar recording how an artifact was produced (no timestamps, so
    reruns are byte-identical)."""
    if os.path.isdir(near_path):
        side = os.path.join(near_path, "provenance.json")
    else:
        side = near_path + ".provenance.json"
    doc = {
        "command": command,
        "config_sha256": config_digest(payload),
        "seed": seed,
        "version": __version__,
    }
    with open(side, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return side


def _sniff_csv_schema(path: str) -> ColumnSchema:
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if not header:
        raise SchemaError(f"{path}: empty CSV")
    for col in ("subject", "x", "y", "zone"):
        if col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")
    features = [c for c in header
                if c not in ("subject", "x", "y", "zone") + _LABEL_COLUMNS]
    gleason = (("gleason_primary", "gleason_secondary")
               if "gleason_primary" in header and "gleason_secondary" in header
               else None)
    return ColumnSchema(
        subject="subject", x="x", y="y", zone="zone", features=features,
        gleason=gleason,
        label_c="c" if gleason is None and "c" in header else None,
        label_g="G" if gleason is None and "G" in header else None,
    )


def _load_cli_dataset(path: str, raw_coords: bool = False):
    if path.endswith(".json"):
        return load_dataset_json(path)
    return load_dataset_csv(path, _sniff_csv_schema(path),
                            standardize=raw_coords)


def _parse_grid(text: str):
    try:
        return tuple(float(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise ValueError(f"bad bandwidth grid {text!r}; expected "
                         "comma-separated positive numbers")


def _default_jobs(args) -> int:
    if getattr(args, "jobs", None):
        return args.jobs
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def _infer_target(dataset) -> str:
    return "ordinal" if dataset.has_ordinal() and dataset.Z > 2 else "binary"


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    payload = load_config_file(args.config)
    if args.seed is not None:
        payload["seed"] = args.seed
    config = sim_config_from_dict(payload)
    target = "ordinal" if config.cuts is not None else "binary"
    simulate = (simulate_ordinal_dataset if target == "ordinal"
                else simulate_binary_dataset)
    dataset = simulate(config)

    out = args.out
    if out.endswith(".csv"):
        save_dataset_csv(dataset, out)
        written = out
    elif out.endswith(".json"):
        save_dataset_json(dataset, out)
        written = out
    else:
        os.makedirs(out, exist_ok=True)
        written = os.path.join(out, "dataset.json")
        save_dataset_json(dataset, written)
    _write_provenance(written if written == out else out, "simulate",
                      sim_config_to_dict(config), config.seed)
    _log(f"simulated {dataset.N} subjects / {dataset.n_total} voxels "
         f"({target}) -> {written}")
    return 0


# ---------------------------------------------------------------------------
# train


def _superlearner_config_from_payload(payload: dict, dataset,
                                      args) -> tuple[SuperLearnerConfig, int]:
    payload = dict(payload)
    target = payload.get("target") or _infer_target(dataset)
    if args.learner:
        specs = tuple(resolve_spec(name, target) for name in args.learner)
    else:
        specs = []
        for entry in payload.get("specs", ["GLM"]):
            if isinstance(entry, str):
                specs.append(resolve_spec(entry, target))
            else:
                specs.append(LearnerSpec(entry["kind"],
                                         dict(entry.get("hyperparams", {}))))
        specs = tuple(specs)
    config = SuperLearnerConfig(
        specs=specs,
        K=args.resolutions or int(payload.get("K", 3)),
        V=args.folds or int(payload.get("V", 5)),
        mode=args.mode or payload.get("mode", "SL"),
        target=target,
        scheme=args.weights or payload.get("scheme", "W1"),
        grid=(_parse_grid(args.bandwidth_grid) if args.bandwidth_grid
              else tuple(payload.get("grid", DEFAULT_BANDWIDTH_GRID))),
        stage_one_output=payload.get("stage_one_output",
                                     "class_probabilities"),
        lam2=float(payload.get("lam2", 1e-4)),
    )
    seed = args.seed if args.seed is not None else int(payload.get("seed", 0))
    return config, seed


def _format_train_report(model) -> str:
    cfg = model.config
    lines = []
    if model.bandwidths is not None:
        for si, bw in enumerate(model.bandwidths):
            hs = "  ".join(f"k={k}: {bw.h[k]:g}" for k in sorted(bw.h))
            lines.append(f"bandwidths [{cfg.specs[si].kind}] {hs}")
    labels = []
    for si, k, z in model.manifest:
        tag = f"{cfg.specs[si].kind}/k{k}"
        labels.append(tag if z is None else f"{tag}/z{z}")
    lines.append("stage-two coefficients by fold")
    lines.append("  columns: " + ", ".join(labels))
    for entry in model.fold_report:
        if "error" in entry:
            lines.append(f"  fold {entry['fold']}: failed ({entry['error']})")
        elif "alpha" in entry:
            coef = ", ".join(f"{a:+.4f}" for a in entry["alpha"])
            lines.append(f"  fold {entry['fold']}: intercept "
                         f"{entry['alpha0']:+.4f}  [{coef}]")
        else:
            coef = ", ".join(f"{b:+.4f}" for b in entry["beta"])
            cuts = ", ".join(f"{a:+.4f}" for a in entry["cutpoints"])
            lines.append(f"  fold {entry['fold']}: cutpoints [{cuts}]  "
                         f"[{coef}]")
    if not model.fold_report:
        lines.append("  (Baseline mode: no stage-two model)")
    return "\n".join(lines)


def cmd_train(args) -> int:
    dataset = _load_cli_dataset(args.dataset, args.raw_coords)
    payload = load_config_file(args.config) if args.config else {}
    config, seed = _superlearner_config_from_payload(payload, dataset, args)
    _log(f"training {config.mode} ({config.target}, "
         f"{len(config.specs)} base learner(s), K={config.K}, V={config.V}, "
         f"seed={seed}) on {dataset.N} subjects / {dataset.n_total} voxels")
    model = train_superlearner(dataset, config, seed=seed)
    doc = superlearner_to_dict(model)
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_provenance(args.out, "train", doc["config"], seed)
    print(_format_train_report(model))
    _log(f"model -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# predict / evaluate


def _load_model(path: str):
    with open(path) as fh:
        return superlearner_from_dict(json.load(fh))


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    dataset = _load_cli_dataset(args.dataset, args.raw_coords)
    target = model.config.target
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        if target == "binary":
            writer.writerow(["subject", "x", "y", "p_cancer"])
        else:
            writer.writerow(["subject", "x", "y",
                             *[f"p_{z}" for z in range(1, model.Z + 1)],
                             "category"])
        for subj in dataset.subjects:
            pred = predict_superlearner(model, subj)
            for j in range(subj.n):
                base = [subj.subject_id,
                        repr(float(subj.coords[j, 0])),
                        repr(float(subj.coords[j, 1]))]
                if target == "binary":
                    writer.writerow(base + [repr(float(pred[j]))])
                else:
                    probs, cats = pred
                    writer.writerow(base
                                    + [repr(float(p)) for p in probs[j]]
                                    + [int(cats[j])])
    finally:
        if args.out:
            out.close()
    if args.out:
        _log(f"predictions -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    dataset = _load_cli_dataset(args.dataset, args.raw_coords)
    target = model.config.target
    labels = dataset.pooled_labels(target)
    if target == "binary":
        scores = np.concatenate(
            [predict_superlearner(model, s) for s in dataset.subjects])
        report = binary_report(scores, labels)
        text = format_binary_report(report)
    else:
        cats = np.concatenate(
            [predict_superlearner(model, s)[1] for s in dataset.subjects])
        report = ordinal_report(cats, labels, dataset.Z)
        text = format_ordinal_report(report)
    report["n_voxels"] = int(labels.size)
    report["mode"] = model.config.mode
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
            fh.write("\n")
        _log(f"report -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# experiment


def cmd_experiment(args) -> int:
    payload = load_config_file(args.config)
    if args.seed is not None:
        payload["seed"] = args.seed
    if args.mode:
        payload["modes"] = args.mode
    if args.weights:
        payload["schemes"] = [args.weights]
    if args.learner:
        payload["learners"] = [name.split("+") for name in args.learner]
    if args.out:
        payload["out_dir"] = args.out
    config = experiment_config_from_dict(payload)
    jobs = _default_jobs(args)

    done = {"n": 0}

    def progress(rec):
        done["n"] += 1
        status = "failed: " + rec["error"] if "error" in rec else "ok"
        _log(f"replicate {done['n']}/{config.R} {status}")

    records = run_experiment(config, jobs=jobs, progress=progress)
    summary = summarize(config, records)
    print(format_summary(summary))
    if config.out_dir:
        paths = write_experiment_outputs(config.out_dir, config, records,
                                         summary)
        _write_provenance(config.out_dir, "experiment",
                          experiment_config_to_dict(config), config.seed)
        _log(f"outputs -> {', '.join(sorted(paths.values()))}")
    return 1 if summary["failures"] else 0


# ---------------------------------------------------------------------------
# bandwidth


def cmd_bandwidth(args) -> int:
    dataset = _load_cli_dataset(args.dataset, args.raw_coords)
    target = args.target or _infer_target(dataset)
    spec = resolve_spec(args.learner or "GLM", target)
    grid = (_parse_grid(args.bandwidth_grid) if args.bandwidth_grid
            else DEFAULT_BANDWIDTH_GRID)
    K = args.resolutions or 3
    V = args.folds or 5
    seed = args.seed if args.seed is not None else 0
    _log(f"selecting bandwidths ({spec.kind}, K={K}, V={V}, target={target})")
    bw = select_bandwidth(dataset, spec, K=K, grid=grid, folds=V,
                          target=target, seed=seed)
    print(json.dumps({"criterion": bw.criterion,
                      "h": {str(k): bw.h[k] for k in sorted(bw.h)}},
                     indent=1, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mrsl",
        description="multi-resolution super-learner voxel classification",
    )
    p.add_argument("--version", action="version",
                   version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, *, config=False, out=False, seed=True):
        if config:
            sp.add_argument("--config", required=config == "required",
                           help="TOML or JSON config file")
        if out:
            sp.add_argument("--out", required=out == "required",
                           help="output path")
        if seed:
            sp.add_argument("--seed", type=int, help="override config seed")

    sp = sub.add_parser("simulate", help="write a synthetic dataset")
    add_common(sp, config="required", out="required")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="fit a model on a dataset")
    sp.add_argument("dataset")
    add_common(sp, config=True, out="required")
    sp.add_argument("--mode", choices=("Baseline", "SL0", "SL"))
    sp.add_argument("--learner", action="append",
                    help="base learner name (repeatable): GLM, QDA, RF")
    sp.add_argument("--weights", choices=("W1", "W2"),
                    help="ordinal stage-two weight scheme")
    sp.add_argument("--resolutions", type=int, metavar="K")
    sp.add_argument("--folds", type=int, metavar="V")
    sp.add_argument("--bandwidth-grid", metavar="H1,H2,...")
    sp.add_argument("--raw-coords", action="store_true",
                    help="CSV coordinates are raw; standardize on load")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="per-voxel predictions as CSV")
    sp.add_argument("model")
    sp.add_argument("dataset")
    add_common(sp, out=True, seed=False)
    sp.add_argument("--raw-coords", action="store_true")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="score a model against labels")
    sp.add_argument("model")
    sp.add_argument("dataset")
    add_common(sp, out=True, seed=False)
    sp.add_argument("--raw-coords", action="store_true")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("experiment",
                        help="replicated Baseline/SL0/SL comparison")
    add_common(sp, config="required", out=True)
    sp.add_argument("--jobs", type=int,
                    help=f"parallel replicates (default ${JOBS_ENV} or 1)")
    sp.add_argument("--mode", action="append",
                    choices=("Baseline", "SL0", "SL"),
                    help="restrict modes (repeatable)")
    sp.add_argument("--weights", choices=("W1", "W2"))
    sp.add_argument("--learner", action="append", metavar="GLM[+QDA...]",
                    help="learner group (repeatable)")
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("bandwidth",
                        help="CV-selected smoothing bandwidth per resolution")
    sp.add_argument("dataset")
    add_common(sp)
    sp.add_argument("--learner", help="GLM, QDA or RF (default GLM)")
    sp.add_argument("--target", choices=("binary", "ordinal"))
    sp.add_argument("--resolutions", type=int, metavar="K")
    sp.add_argument("--folds", type=int, metavar="V")
    sp.add_argument("--bandwidth-grid", metavar="H1,H2,...")
    sp.add_argument("--raw-coords", action="store_true")
    sp.set_defaults(func=cmd_bandwidth)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, SchemaError, ParseError, FitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
