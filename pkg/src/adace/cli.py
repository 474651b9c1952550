"""Command-line entry point: estimate | simulate | oracle.

Every run writes its outputs plus a manifest.json capturing the command,
flags, seed and config snapshot; `adace --from-manifest m.json --out DIR`
replays a manifest and reproduces the output bytes exactly.  All randomness
flows from the single --seed flag; ADACE_THREADS (or --threads) only caps
the worker pool and never changes results.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time

from . import __version__
from .estimators import (E0, E0_UNION_E1, E1, StratumTriple, estimate,
                         write_estimates_csv)
from .imputation import BASELINE_ONLY, FULL, ImputationPlan, impute_many
from .inference import Target, bootstrap, rubin_for_target, write_inference_csv
from .simulation import (ConfigError, SETTINGS, SettingConfig, make_null,
                         oracle_truth, resolve_setting, run_study, save_config,
                         write_oracle_csv, write_study_csv)
from .streams import derive_seed
from .trial_data import CsvParseError, StratumLabel, load_csv, validate

_SUBSETS = {"E0": E0, "E1": E1, "E0uE1": E0_UNION_E1}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adace",
        description="Adherer-stratum treatment-effect estimation via multiple "
                    "imputation, with bootstrap/Rubin inference and a "
                    "simulation-study harness.")
    parser.add_argument("--from-manifest", metavar="PATH",
                        help="replay a previous run from its manifest")
    parser.add_argument("--out", metavar="DIR",
                        help="output directory (with --from-manifest: override)")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")

    est = sub.add_parser("estimate", help="analyse a trial CSV")
    est.add_argument("data", help="trial CSV file")
    est.add_argument("--stratum", action="append", choices=["s*+", "s+*", "s++"],
                     help="stratum to report (repeatable; default s*+ and s++)")
    est.add_argument("--subset", default="E0uE1", choices=sorted(_SUBSETS))
    est.add_argument("--M", type=int, default=100, help="number of imputations")
    est.add_argument("--B", type=int, default=50, help="bootstrap replicates")
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--mode", default="full", choices=["full", "baseline-only"])
    est.add_argument("--variance", default="both",
                     choices=["bootstrap", "rubin", "both"])
    est.add_argument("--out", dest="out_dir", default="adace-out")

    sim = sub.add_parser("simulate", help="run a replication study")
    sim.add_argument("--setting", required=True,
                     help=f"preset ({', '.join(sorted(SETTINGS))}) or config file")
    sim.add_argument("--R", type=int, default=500, help="replications")
    sim.add_argument("--M", type=int, default=100)
    sim.add_argument("--B", type=int, default=50,
                     help="bootstrap replicates (0 disables the bootstrap)")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--null", action="store_true",
                     help="zero the treatment-effect coefficients and report "
                          "the rejection rate")
    sim.add_argument("--mode", default="full", choices=["full", "baseline-only"])
    sim.add_argument("--threads", type=int, default=None)
    sim.add_argument("--out", dest="out_dir", default="adace-out")

    orc = sub.add_parser("oracle", help="Monte Carlo truth for a setting")
    orc.add_argument("--setting", required=True)
    orc.add_argument("--n", default="1e6", help="oracle population size")
    orc.add_argument("--seed", type=int, default=0)
    orc.add_argument("--null", action="store_true")
    orc.add_argument("--out", dest="out_dir", default="adace-out")
    return parser


def _plan(mode: str) -> ImputationPlan:
    return ImputationPlan(mode=FULL if mode == "full" else BASELINE_ONLY)


def _write_manifest(out_dir: str, command: str, args: dict, outputs: list[str],
                    config: SettingConfig | None, elapsed: float) -> None:
    manifest = {
        "tool": "adace",
        "version": __version__,
        "command": command,
        "args": args,
        "config": config.as_dict() if config is not None else None,
        "outputs": outputs,
        "wall_clock_s": round(elapsed, 3),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_estimate(ns) -> int:
    t0 = time.monotonic()
    try:
        dataset = load_csv(ns.data)
    except FileNotFoundError:
        print(f"error: no such file: {ns.data}", file=sys.stderr)
        return 1
    except CsvParseError as e:
        print(f"error: {ns.data}: {e}", file=sys.stderr)
        return 1
    violations = validate(dataset)
    if violations:
        for v in violations[:10]:
            print(f"error: invalid data: {v}", file=sys.stderr)
        if len(violations) > 10:
            print(f"error: ... and {len(violations) - 10} more", file=sys.stderr)
        return 1

    strata = [StratumLabel.parse(s) for s in (ns.stratum or ["s*+", "s++"])]
    subset = _SUBSETS[ns.subset]
    plan = _plan(ns.mode)
    os.makedirs(ns.out_dir, exist_ok=True)

    imps = impute_many(dataset, plan, ns.M, derive_seed(ns.seed, 0))
    triples: dict[StratumLabel, StratumTriple] = {
        s: estimate(imps, s, subset) for s in strata}
    write_estimates_csv([triples[s] for s in strata],
                        os.path.join(ns.out_dir, "estimates.csv"))
    outputs = ["estimates.csv"]

    targets = [Target(s, tr, subset) for s in strata for tr in (0, 1, "difference")]
    rows = []
    if ns.variance in ("bootstrap", "both"):
        points = {tgt: triples[tgt.stratum].by_treatment(tgt.treatment).pooled
                  for tgt in targets}
        boots = bootstrap(dataset, plan, ns.M, ns.B, derive_seed(ns.seed, 1),
                          targets, point_estimates=points)
        for tgt in targets:
            br = boots[tgt]
            rows.append((tgt.parameter, "bootstrap", br.point, br.se,
                         br.ci[0], br.ci[1], ns.B))
    if ns.variance in ("rubin", "both"):
        for tgt in targets:
            rr = rubin_for_target(imps, triples[tgt.stratum], tgt)
            rows.append((tgt.parameter, "rubin", rr.qbar, rr.se,
                         rr.ci[0], rr.ci[1], ns.M))
    if rows:
        write_inference_csv(rows, os.path.join(ns.out_dir, "inference.csv"))
        outputs.append("inference.csv")

    args = {"data": ns.data, "stratum": [s.value for s in strata],
            "subset": ns.subset, "M": ns.M, "B": ns.B, "seed": ns.seed,
            "mode": ns.mode, "variance": ns.variance, "out": ns.out_dir}
    _write_manifest(ns.out_dir, "estimate", args, outputs, None,
                    time.monotonic() - t0)
    print(f"wrote {', '.join(outputs)} and manifest.json to {ns.out_dir}")
    return 0


def _cmd_simulate(ns) -> int:
    t0 = time.monotonic()
    cfg = resolve_setting(ns.setting)
    if ns.null:
        cfg = make_null(cfg)
    variance = "both" if ns.B >= 2 else "rubin"
    report = run_study(cfg, ns.R, ns.M, max(ns.B, 0), ns.seed,
                       plan=_plan(ns.mode), variance=variance,
                       threads=ns.threads, progress=True)
    os.makedirs(ns.out_dir, exist_ok=True)
    write_study_csv(report, os.path.join(ns.out_dir, "study.csv"),
                    include_reject=ns.null)
    args = {"setting": ns.setting, "R": ns.R, "M": ns.M, "B": ns.B,
            "seed": ns.seed, "null": ns.null, "mode": ns.mode,
            "out": ns.out_dir}
    _write_manifest(ns.out_dir, "simulate", args, ["study.csv"], cfg,
                    time.monotonic() - t0)
    if report.n_failed:
        print(f"warning: {report.n_failed}/{report.R} replications failed",
              file=sys.stderr)
    print(f"wrote study.csv and manifest.json to {ns.out_dir}")
    return 0


def _cmd_oracle(ns) -> int:
    t0 = time.monotonic()
    cfg = resolve_setting(ns.setting)
    if ns.null:
        cfg = make_null(cfg)
    n = int(float(ns.n))
    truth = oracle_truth(cfg, n, ns.seed)
    os.makedirs(ns.out_dir, exist_ok=True)
    write_oracle_csv(truth, os.path.join(ns.out_dir, "oracle.csv"))
    args = {"setting": ns.setting, "n": ns.n, "seed": ns.seed, "null": ns.null,
            "out": ns.out_dir}
    _write_manifest(ns.out_dir, "oracle", args, ["oracle.csv"], cfg,
                    time.monotonic() - t0)
    print(f"wrote oracle.csv and manifest.json to {ns.out_dir}")
    return 0


def _replay_setting(manifest) -> str:
    """Setting argument for a replay: the preset name, or the embedded config
    snapshot materialised to a file (the original path may be gone)."""
    name = manifest["args"]["setting"]
    if name in SETTINGS:
        return name
    cfg = SettingConfig.from_dict(manifest["config"])
    fd, path = tempfile.mkstemp(prefix="adace-config-", suffix=".txt")
    os.close(fd)
    save_config(cfg, path)
    return path


def _replay_manifest(path: str, out_override: str | None) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    command = manifest["command"]
    args = manifest["args"]
    argv = [command]
    if command == "estimate":
        argv.append(args["data"])
        for s in args["stratum"]:
            argv += ["--stratum", s]
        argv += ["--subset", args["subset"], "--M", str(args["M"]),
                 "--B", str(args["B"]), "--seed", str(args["seed"]),
                 "--mode", args["mode"], "--variance", args["variance"]]
    elif command == "simulate":
        argv += ["--setting", _replay_setting(manifest), "--R", str(args["R"]),
                 "--M", str(args["M"]), "--B", str(args["B"]),
                 "--seed", str(args["seed"]), "--mode", args["mode"]]
        if args["null"]:
            argv.append("--null")
    elif command == "oracle":
        argv += ["--setting", _replay_setting(manifest), "--n", str(args["n"]),
                 "--seed", str(args["seed"])]
        if args.get("null"):
            argv.append("--null")
    else:
        raise ConfigError(f"manifest has unknown command {command!r}")
    argv += ["--out", out_override or args["out"]]
    return argv


def main(argv=None) -> int:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    if ns.from_manifest:
        try:
            replay = _replay_manifest(ns.from_manifest, ns.out)
        except FileNotFoundError:
            print(f"error: no such manifest: {ns.from_manifest}", file=sys.stderr)
            return 1
        except (KeyError, json.JSONDecodeError, ConfigError) as e:
            print(f"error: bad manifest: {e}", file=sys.stderr)
            return 1
        return main(replay)
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        if ns.command == "estimate":
            return _cmd_estimate(ns)
        if ns.command == "simulate":
            return _cmd_simulate(ns)
        return _cmd_oracle(ns)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
