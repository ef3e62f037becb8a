"""Batch front-end over the staged pipeline: run scenarios, export CDFs.

Two subcommands, no interactive UI. ``run`` executes a scenario manifest
through the stage chain and writes the artifact CSVs next to a printed
per-group error summary; ``cdf`` reduces an errors CSV to plot-ready
(error_m, cumulative_fraction) rows for any external plotting tool.

Exit codes: 0 on success, 1 for runtime failures, 2 for unusable input
(missing files, malformed JSON, bad stage lists). Re-running ``run`` with
the same manifest rewrites byte-identical artifacts; repeats fan out to
``repeat_NNN`` subdirectories with consecutive seeds.
"""

import argparse
import csv
import dataclasses
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import sim
from .pipeline import (GROUP_CHOICES, STAGES, StageError, check_stages,
                       empirical_cdf, run_pipeline)


@dataclass(frozen=True)
class RunManifest:
    """Everything one batch run needs: inputs, outputs, and stage list."""

    scenario_path: str
    out_dir: str
    stages: tuple = STAGES
    seed: Optional[int] = None
    group_by: str = "imsi"
    repeat: int = 1


def _fail(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def _print_summary(summary_rows, label: str) -> None:
    if not summary_rows:
        return
    width = max(len("group"), *(len(str(r["group"])) for r in summary_rows))
    print(f"# {label}")
    print(f"{'group':<{width}}  {'n':>4}  {'median_m':>9}  {'p90_m':>9}")
    for row in summary_rows:
        print(f"{row['group']:<{width}}  {row['n_connections']:>4}  "
              f"{row['median_m']:>9.3f}  {row['p90_m']:>9.3f}")


def cmd_run(manifest: RunManifest) -> int:
    try:
        scenario = sim.load_scenario(manifest.scenario_path)
    except FileNotFoundError:
        _fail(f"scenario not found: {manifest.scenario_path}")
        return 2
    except sim.ScenarioError as exc:
        _fail(str(exc))
        return 2
    try:
        stages = check_stages(manifest.stages)
    except StageError as exc:
        _fail(str(exc))
        return 2
    if manifest.group_by not in GROUP_CHOICES:
        _fail(f"unknown group-by {manifest.group_by!r}")
        return 2
    if manifest.repeat < 1:
        _fail("repeat must be >= 1")
        return 2
    if manifest.seed is not None:
        scenario = dataclasses.replace(scenario, seed=manifest.seed)
    out_root = Path(manifest.out_dir)
    try:
        for i in range(manifest.repeat):
            if manifest.repeat == 1:
                out_dir, run = out_root, scenario
            else:
                out_dir = out_root / f"repeat_{i:03d}"
                run = dataclasses.replace(scenario, seed=scenario.seed + i)
            ctx = run_pipeline(run, stages, out_dir=out_dir,
                               group_by=manifest.group_by)
            _print_summary(ctx.summary_rows,
                           f"{out_dir} seed={run.seed} "
                           f"stages={','.join(stages)}")
    except sim.ScenarioError as exc:
        _fail(str(exc))
        return 2
    except OSError as exc:
        _fail(str(exc))
        return 1
    return 0


def cmd_cdf(errors_csv, group_by: Optional[str] = None) -> list:
    """Reduce an errors CSV to sorted (error_m, cumulative_fraction) rows.

    With ``group_by`` set to a column name, one CDF per distinct value is
    emitted and each output row gains that leading group column. Raises
    ValueError on an empty input or a missing column.
    """
    with open(errors_csv, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"no data rows in {errors_csv}")
    if group_by is not None and group_by not in rows[0]:
        raise ValueError(f"no column {group_by!r} in {errors_csv}")
    out = []
    if group_by is None:
        for error_m, frac in empirical_cdf(
                [float(r["error_m"]) for r in rows]):
            out.append({"error_m": error_m, "cumulative_fraction": frac})
        return out
    groups: dict = {}
    for row in rows:
        groups.setdefault(row[group_by], []).append(float(row["error_m"]))
    for key in sorted(groups):
        for error_m, frac in empirical_cdf(groups[key]):
            out.append({group_by: key, "error_m": error_m,
                        "cumulative_fraction": frac})
    return out


def _write_cdf(rows, destination) -> None:
    writer = csv.DictWriter(destination, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tatrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario through the stages")
    run_p.add_argument("--scenario", required=True, help="scenario JSON path")
    run_p.add_argument("--out", required=True, help="artifact directory")
    run_p.add_argument("--stages", default=",".join(STAGES),
                       help="comma-separated stage list "
                            f"(default: {','.join(STAGES)})")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
    run_p.add_argument("--group-by", default="imsi", choices=GROUP_CHOICES,
                       help="summary grouping (default: imsi)")
    run_p.add_argument("--repeat", type=int, default=1,
                       help="fan out N runs with consecutive seeds")

    cdf_p = sub.add_parser("cdf", help="empirical CDF from an errors CSV")
    cdf_p.add_argument("errors_csv", help="errors.csv from a run")
    cdf_p.add_argument("--group-by", default=None,
                       help="emit one CDF per value of this column")
    cdf_p.add_argument("--out", default=None,
                       help="output CSV path (default: stdout)")

    args = parser.parse_args(argv)
    if args.command == "run":
        manifest = RunManifest(
            scenario_path=args.scenario, out_dir=args.out,
            stages=tuple(s.strip() for s in args.stages.split(",") if s),
            seed=args.seed, group_by=args.group_by, repeat=args.repeat)
        return cmd_run(manifest)
    try:
        rows = cmd_cdf(args.errors_csv, group_by=args.group_by)
    except FileNotFoundError:
        _fail(f"errors CSV not found: {args.errors_csv}")
        return 2
    except ValueError as exc:
        _fail(str(exc))
        return 2
    if args.out is None:
        try:
            _write_cdf(rows, sys.stdout)
        except BrokenPipeError:
            # Downstream consumer (head, less) closed the pipe; park stdout
            # on devnull so the interpreter's exit flush stays quiet.
            os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
    else:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            _write_cdf(rows, fh)
    return 0


if __name__ == "__main__":
    sys.exit(main())
