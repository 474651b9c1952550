#!/usr/bin/env python3
"""Desk-scale replication campaign for the bundled trial settings.

Runs, for each setting: the truth oracle, the full-pipeline study (bias,
bootstrap and Rubin coverage), the baseline-only comparator study, and the
null-scenario type-1-error study.  Writes one CSV per run into --out.

This is the long way round (hours on a laptop); see quick_demo.py for a
thirty-second tour of the same pipeline.
"""

import argparse
import os
import sys
import time

from adace.imputation import BASELINE_ONLY, ImputationPlan
from adace.simulation import (SETTINGS, make_null, oracle_truth, run_study,
                              write_oracle_csv, write_study_csv)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="tables-out")
    parser.add_argument("--settings", nargs="+", default=["setting1", "setting2"])
    parser.add_argument("--R", type=int, default=500)
    parser.add_argument("--M", type=int, default=100)
    parser.add_argument("--B", type=int, default=50)
    parser.add_argument("--seed", type=int, default=20260808)
    parser.add_argument("--oracle-n", type=float, default=1e7)
    parser.add_argument("--threads", type=int, default=None)
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    for name in args.settings:
        cfg = SETTINGS[name]
        t0 = time.time()
        print(f"== {name}: oracle (n={args.oracle_n:.0e})", flush=True)
        truth = oracle_truth(cfg, int(args.oracle_n), seed=args.seed)
        write_oracle_csv(truth, os.path.join(args.out, f"{name}-oracle.csv"))

        print(f"== {name}: full-method study (R={args.R})", flush=True)
        study = run_study(cfg, args.R, args.M, args.B, args.seed, truth=truth,
                          threads=args.threads, progress=True)
        write_study_csv(study, os.path.join(args.out, f"{name}-study.csv"))

        print(f"== {name}: baseline-only comparator (R={args.R})", flush=True)
        comparator = run_study(cfg, args.R, args.M, 0, args.seed + 1,
                               plan=ImputationPlan(mode=BASELINE_ONLY),
                               variance="none", truth=truth,
                               threads=args.threads, progress=True)
        write_study_csv(comparator,
                        os.path.join(args.out, f"{name}-comparator.csv"))

        print(f"== {name}: null scenario (R={args.R})", flush=True)
        null_cfg = make_null(cfg)
        null_truth = oracle_truth(null_cfg, 2_000_000, seed=args.seed)
        null_study = run_study(null_cfg, args.R, args.M, args.B, args.seed + 2,
                               truth=null_truth, threads=args.threads,
                               progress=True)
        write_study_csv(null_study, os.path.join(args.out, f"{name}-null.csv"),
                        include_reject=True)
        print(f"== {name} done in {(time.time() - t0) / 60:.1f} min", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
