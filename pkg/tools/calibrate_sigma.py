"""Calibrate the uplink ToA jitter default against the replication gates.

The replication scenario (five phones, six tape-measured distances, six
connections per distance) is judged on two aggregate gates:

* per-phone 90th-percentile of per-connection distance error in [4, 8] m,
  bracketing the measured per-phone values around 5-7 m;
* pooled median error of 2 m, give or take 1 m.

Each connection error is |median of 14 sum-delay measurements - truth|/2
converted to metres, so the per-connection sigma shrinks by the median
aggregation factor 1.2533/sqrt(14) relative to the per-measurement ToA
sigma.  Working backwards from the gate centre (P90 ~ 5.7 m, median
~ 2.3 m) predicts a per-measurement sigma near 70,000 ps (about 10.5 m
of one-way distance equivalent); this sweep confirms the prediction
empirically and pins the shipped default.

Usage:
    python3 tools/calibrate_sigma.py --sweep
    python3 tools/calibrate_sigma.py --write-scenario scenarios/replication.json

The pinned value lives in two places kept in sync by hand: the
``toa_sigma_ps`` field of scenarios/replication.json (written here) and
``tatrack.sim.DEFAULT_TOA_SIGMA_PS``.
"""

import argparse
import json
import sys
import time

import numpy as np

from tatrack import sim
from tatrack.geometry import Position
from tatrack.pipeline import STAGES, run_pipeline
from tatrack.timebase import PS_PER_SUBFRAME

#: Distances (m) between phone and the colocated eNodeB/probe bench.
DISTANCES_M = (0.0, 7.5, 15.0, 30.0, 45.0, 60.0)

#: Phones used in the distance-accuracy replication runs.
PHONES = ("Huawei P20 Pro", "Huawei P30", "iPhone X", "iPhone 8",
          "Samsung Galaxy s10")

#: Per-measurement uplink ToA sigma pinned by the sweep below.
PINNED_TOA_SIGMA_PS = 70_000

_BLOCK_SF = 12_000       # one distance block: 12 s of subframes
_CONNS_PER_BLOCK = 6     # reconnect_rate 30/min -> one connection per 2 s


def replication_scenario(toa_sigma_ps: int = PINNED_TOA_SIGMA_PS,
                         seed: int = 11) -> sim.Scenario:
    """Five phones stepping through six bench distances, 36 connections each.

    Each phone holds one distance for a 12 s block (six connections at
    30/min), then moves to the next block's distance during a 1 ms gap
    that no connection ever straddles: connection starts stay within the
    first 10.1 s of every block and a connection spans 76 subframes.
    """
    duration_sf = _BLOCK_SF * len(DISTANCES_M)
    ues = []
    for i, model in enumerate(PHONES):
        waypoints = []
        for b, dist in enumerate(DISTANCES_M):
            t0 = b * _BLOCK_SF * PS_PER_SUBFRAME
            t1 = ((b + 1) * _BLOCK_SF - 1) * PS_PER_SUBFRAME
            pos = Position(dist, 0.0)
            waypoints.append((t0, pos))
            waypoints.append((t1, pos))
        ues.append(sim.UeProfile(
            model=model,
            waypoints=tuple(waypoints),
            reconnect_rate=30.0,
            imsi=f"00101000000100{i}",
            tmsi=0xB000_0000 + i,
        ))
    return sim.Scenario(
        enbs=(sim.Enb(id="enb0", position=Position(0.0, 0.0)),),
        probes=(sim.Probe(id="probe0", position=Position(0.0, 0.0)),),
        ues=tuple(ues),
        duration_ps=duration_sf * PS_PER_SUBFRAME,
        seed=seed,
        noise=sim.NoiseModel(toa_sigma_ps=toa_sigma_ps, hw_bias=True),
    )


def gate_stats(toa_sigma_ps: int, seed: int) -> dict:
    """Run the pipeline once and reduce errors to the two gate numbers."""
    ctx = run_pipeline(replication_scenario(toa_sigma_ps, seed),
                       stages=STAGES)
    by_model: dict = {}
    pooled = []
    for row in ctx.error_rows:
        by_model.setdefault(row["model"], []).append(row["error_m"])
        pooled.append(row["error_m"])
    p90 = {model: float(np.percentile(errs, 90))
           for model, errs in sorted(by_model.items())}
    counts = {model: len(errs) for model, errs in by_model.items()}
    return {"p90": p90, "median": float(np.median(pooled)),
            "counts": counts, "n": len(pooled)}


def cmd_sweep(args) -> int:
    grid = [int(v) for v in args.grid.split(",")]
    seeds = [int(v) for v in args.seeds.split(",")]
    print(f"{'sigma_ps':>9} {'seed':>4} "
          + " ".join(f"{m.split()[-1]:>7}" for m in PHONES)
          + f" {'worstP90':>8} {'median':>6}  verdict")
    best = None
    for sigma in grid:
        sigma_ok = True
        worst_gaps = []
        for seed in seeds:
            t0 = time.monotonic()
            stats = gate_stats(sigma, seed)
            dt = time.monotonic() - t0
            p90s = [stats["p90"][m] for m in PHONES]
            worst = max(p90s, key=lambda v: abs(v - 6.0))
            ok = (all(4.0 <= v <= 8.0 for v in p90s)
                  and 1.0 <= stats["median"] <= 3.0)
            sigma_ok = sigma_ok and ok
            worst_gaps.append(max(abs(v - 5.7) for v in p90s))
            print(f"{sigma:>9} {seed:>4} "
                  + " ".join(f"{v:7.3f}" for v in p90s)
                  + f" {worst:8.3f} {stats['median']:6.3f}  "
                  + ("ok" if ok else "OUT") + f"  ({dt:.1f}s)")
        if sigma_ok:
            score = max(worst_gaps)
            if best is None or score < best[1]:
                best = (sigma, score)
    if best is None:
        print("no grid value satisfied both gates")
        return 1
    print(f"recommended toa_sigma_ps: {best[0]} "
          f"(worst per-phone P90 gap from 5.7 m: {best[1]:.3f} m)")
    return 0


def cmd_write(args) -> int:
    scenario = replication_scenario(args.sigma_ps, args.seed)
    data = sim.scenario_to_dict(scenario)
    with open(args.write_scenario, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.write_scenario} (toa_sigma_ps={args.sigma_ps}, "
          f"seed={args.seed})")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sweep", action="store_true",
                        help="run the calibration grid and report gates")
    parser.add_argument("--grid",
                        default="40000,55000,70000,85000,100000",
                        help="comma-separated toa_sigma_ps candidates")
    parser.add_argument("--seeds", default="1,2,3",
                        help="comma-separated scenario seeds")
    parser.add_argument("--write-scenario", metavar="PATH",
                        help="write the replication scenario JSON here")
    parser.add_argument("--sigma-ps", type=int,
                        default=PINNED_TOA_SIGMA_PS,
                        help="toa_sigma_ps for --write-scenario")
    parser.add_argument("--seed", type=int, default=11,
                        help="scenario seed for --write-scenario")
    args = parser.parse_args(argv)
    if args.sweep:
        return cmd_sweep(args)
    if args.write_scenario:
        return cmd_write(args)
    parser.print_help()
    return 2


if __name__ == "__main__":
    sys.exit(main())
