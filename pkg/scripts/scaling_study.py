#!/usr/bin/env python3
"""Strong and weak scaling over simulated rank counts on the circular flow.

Thin front end over picforest.bench: runs the same configuration at each
rank count with the threaded engine and writes per-phase wall times. Results
are meaningful as a parallel-speedup measurement only when the host has at
least as many cores as the largest rank count.
"""

import argparse
import os
import sys

from picforest.bench import scaling_benchmark, write_scaling_csv
from picforest.config import RunConfig


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--particles", type=int, default=20000)
    parser.add_argument("--steps", type=int, default=50)
    parser.add_argument("--nx", type=int, default=32)
    parser.add_argument("--ranks", default="1,2,4,8")
    parser.add_argument("--mode", choices=("strong", "weak"), default="strong")
    parser.add_argument("--out", default="scaling.csv")
    args = parser.parse_args(argv)

    ranks = [int(p) for p in args.ranks.split(",")]
    if os.cpu_count() < max(ranks):
        print(
            f"warning: host has {os.cpu_count()} cores; speedups beyond that "
            "rank count measure scheduling overhead, not parallelism"
        )
    cfg = RunConfig(
        scenario="circular_flow",
        steps=args.steps,
        mesh_nx=args.nx,
        mesh_ny=args.nx,
        generator_count=args.particles,
    ).validate()
    rows = scaling_benchmark(cfg, ranks, mode=args.mode)
    for row in rows:
        print(
            f"P={row['ranks']}: wall={row['wall']:.3f}s "
            f"per-step={row['per_step']*1e3:.2f}ms "
            f"parallel-phases={row['parallel_phases']:.3f}s"
        )
    write_scaling_csv(args.out, rows)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
