#!/usr/bin/env python3
"""Replicated binary comparison: Baseline vs SL0 vs SL on a simulation preset.

Desk-scale defaults (20 replicates, 34 subjects, GLM only) finish in a few
minutes on one core.  Stacked groups like GLM+QDA+RF cost roughly one
stage-one CV per distinct learner, shared across groups and modes.
"""

import argparse
import sys
import time

from mrsl.experiment import (
    ExperimentConfig,
    format_summary,
    run_experiment,
    summarize,
    write_experiment_outputs,
)
from mrsl.simgen import preset, preset_names


def parse_groups(text):
    """'GLM,QDA,GLM+QDA' -> (('GLM',), ('QDA',), ('GLM', 'QDA'))."""
    return tuple(tuple(tok.split("+")) for tok in text.split(",") if tok)


def main():
    binary_presets = [n for n in preset_names() if not n.startswith("ordinal")]
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="strong-hetero-moderate-spatial",
                    choices=binary_presets)
    ap.add_argument("--replicates", type=int, default=20)
    ap.add_argument("--subjects", type=int, default=34)
    ap.add_argument("--folds", type=int, default=5)
    ap.add_argument("--learners", default="GLM", type=parse_groups,
                    help="comma-separated groups; '+' stacks learners "
                         "(e.g. GLM,QDA,GLM+QDA+RF)")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="directory for replicates/summary files")
    args = ap.parse_args()

    config = ExperimentConfig(
        target="binary",
        learners=args.learners,
        modes=("Baseline", "SL0", "SL"),
        V=args.folds,
        R=args.replicates,
        seed=args.seed,
        sim=preset(args.preset, n_subjects=args.subjects),
        out_dir=args.out,
    )

    t0 = time.time()

    def progress(rec):
        status = "FAILED " + rec["error"] if "error" in rec else "ok"
        print(f"[{time.time() - t0:7.1f}s] replicate {rec['replicate'] + 1}"
              f"/{config.R} {status}", file=sys.stderr)

    records = run_experiment(config, jobs=args.jobs, progress=progress)
    summary = summarize(config, records)
    print(format_summary(summary))
    if args.out:
        paths = write_experiment_outputs(args.out, config, records, summary)
        print(f"wrote {', '.join(sorted(paths.values()))}", file=sys.stderr)
    return 1 if summary["failures"] else 0


if __name__ == "__main__":
    sys.exit(main())
