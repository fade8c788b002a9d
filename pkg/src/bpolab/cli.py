"""Command-line entry point.

Every failure prints one line ``error: {"kind": ..., "message": ...}`` to
stderr and exits nonzero. ``BPOLAB_VERBOSE=1`` adds progress lines.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import harness
from .oracle import CoverageError, ConvergenceError, oracle_bundle

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_FAILURE, **extra):
        super().__init__(message)
        self.kind, self.code, self.extra = kind, code, extra


def _verbose() -> bool:
    return os.environ.get("BPOLAB_VERBOSE", "0") not in ("", "0")


def _log(msg: str) -> None:
    if _verbose():
        print(msg, file=sys.stderr)


def cmd_run(args) -> int:
    config = harness.load_config(args.config)
    if args.seeds:
        config.seeds = harness.parse_seeds(args.seeds)
        if not config.seeds:
            raise harness.ConfigError("seeds", "seed list is empty")
    _log(f"running {config.agent} on {config.env}, seeds {config.seeds}")
    result = harness.run_experiment(config, args.out, jobs=args.jobs)
    for path in result.run_files:
        print(path)
    if result.aggregate_file is not None:
        print(result.aggregate_file)
    if result.errors:
        raise CliError("run_failed", f"{len(result.errors)} seed(s) failed",
                       seeds=[e["seed"] for e in result.errors])
    return 0


def cmd_aggregate(args) -> int:
    files = harness.run_files(args.input)
    table = harness.aggregate(files)
    out = Path(args.out)
    plot = out.with_name(out.stem + "_plot.csv")
    harness.write_aggregate(table, out, plot)
    print(out)
    print(plot)
    return 0


def cmd_compare(args) -> int:
    cmp = harness.compare_dirs(args.a, args.b)
    print(f"a: {cmp.a_mean:.4f} +/- {cmp.a_se:.4f} (n={cmp.n_a})")
    print(f"b: {cmp.b_mean:.4f} +/- {cmp.b_se:.4f} (n={cmp.n_b})")
    verdict = f"{cmp.better} better" if cmp.significant else "no significant difference"
    print(f"significance: {verdict} [rule: {cmp.rule}]")
    print(f"b no worse than a - 1 SE: {cmp.no_worse}")
    if args.json:
        print(json.dumps(cmp.to_dict()))
    return 0


def cmd_demo(args) -> int:
    res = harness.gaussian_tail_demo(args.samples, args.std, seed=args.seed, n_trials=args.trials)
    summary = res.summary()
    if args.out:
        import numpy as np
        np.savetxt(args.out, np.column_stack([res.naive, res.importance]), delimiter=",",
                   header="naive,importance", comments="")
        summary["estimates_file"] = args.out
    print(json.dumps(summary))
    return 0


def cmd_oracle(args) -> int:
    mdp = harness.load_mdp(args.mdp)
    pi = harness.load_policy(args.policy, mdp)
    bundle = oracle_bundle(mdp, pi)
    if args.out:
        bundle.to_csv(args.out)
        print(args.out)
    else:
        import csv
        rows = list(bundle.rows())
        writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpolab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train every seed of an experiment config")
    run.add_argument("--config", required=True, help="JSON file of flat key/value pairs")
    run.add_argument("--seeds", help="comma list or lo..hi; overrides the config")
    run.add_argument("--out", help="output directory (default: config out_dir or ./runs)")
    run.add_argument("--jobs", type=int, default=1, help="seeds to run in parallel")
    run.set_defaults(func=cmd_run)

    agg = sub.add_parser("aggregate", help="mean and SE across the run CSVs of a directory")
    agg.add_argument("--in", dest="input", required=True)
    agg.add_argument("--out", required=True)
    agg.set_defaults(func=cmd_aggregate)

    cmp = sub.add_parser("compare", help="final-return comparison of two run directories")
    cmp.add_argument("--a", required=True)
    cmp.add_argument("--b", required=True)
    cmp.add_argument("--json", action="store_true", help="also print the result as JSON")
    cmp.set_defaults(func=cmd_compare)

    demo = sub.add_parser("demo", help="demonstrations")
    demo_sub = demo.add_subparsers(dest="demo", required=True)
    tail = demo_sub.add_parser("gaussian-tail", help="naive vs IS estimates of P(X > 4)")
    tail.add_argument("--samples", type=int, required=True, help="samples per trial")
    tail.add_argument("--std", type=float, default=2.0, help="proposal standard deviation")
    tail.add_argument("--trials", type=int, default=1000)
    tail.add_argument("--seed", type=int, default=0)
    tail.add_argument("--out", help="CSV of per-trial estimates")
    tail.set_defaults(func=cmd_demo)

    orc = sub.add_parser("oracle", help="dump exact tabular quantities as CSV")
    orc.add_argument("--mdp", required=True)
    orc.add_argument("--policy", required=True)
    orc.add_argument("--out")
    orc.set_defaults(func=cmd_oracle)
    return p


def _error_line(kind: str, message: str, **extra) -> str:
    return "error: " + json.dumps({"kind": kind, "message": message, **extra})


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            print(_error_line("usage", "invalid command line"), file=sys.stderr)
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(_error_line(exc.kind, str(exc), **exc.extra), file=sys.stderr)
        return exc.code
    except harness.ConfigError as exc:
        print(_error_line("config", str(exc), field=exc.field), file=sys.stderr)
        return EXIT_USAGE
    except harness.AlignmentError as exc:
        print(_error_line("alignment", str(exc), files=exc.files), file=sys.stderr)
        return EXIT_FAILURE
    except (harness.MdpFormatError, CoverageError, ConvergenceError) as exc:
        print(_error_line(type(exc).__name__, str(exc)), file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, ValueError) as exc:
        print(_error_line(type(exc).__name__, str(exc)), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
