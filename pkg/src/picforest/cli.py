"""Command-line entry points: run, bench, converge."""

from __future__ import annotations

import argparse
import sys

import numpy as np


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="picforest",
        description="Particle-in-cell toolkit on an adaptively refined quadtree "
        "with simulated parallel ranks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a configured simulation")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--ranks", type=int, default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default="out")
    p_run.add_argument("--engine", choices=("lockstep", "threaded"),
                       default="lockstep")

    p_bench = sub.add_parser("bench", help="strong/weak scaling benchmark")
    p_bench.add_argument("--config", required=True)
    p_bench.add_argument("--ranks", default="1,2,4,8",
                         help="comma-separated rank counts")
    p_bench.add_argument("--mode", choices=("strong", "weak"), default="strong")
    p_bench.add_argument("--out", default="scaling.csv")

    p_conv = sub.add_parser("converge", help="integrator convergence study")
    p_conv.add_argument("--field", choices=("rotation", "shear", "constant"),
                        default="rotation")
    p_conv.add_argument("--scheme", choices=("euler", "rk2", "rk4"),
                        default="rk4")
    p_conv.add_argument("--dts", default=None,
                        help="comma-separated step sizes (default: T/8 halved 5x)")
    p_conv.add_argument("--t-final", type=float, default=np.pi / 2)

    args = parser.parse_args(argv)

    if args.command == "run":
        from .config import load_config
        from .harness import run

        cfg = load_config(args.config)
        if args.ranks is not None:
            cfg.ranks = args.ranks
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate()
        sim = run(cfg, out_dir=args.out, engine=args.engine)
        alive = sum(len(s.store) for s in sim.ranks)
        print(
            f"steps={sim.step} alive={alive} discarded={sim.total_discarded} "
            f"out={args.out}"
        )
        return 0

    if args.command == "bench":
        from .bench import scaling_benchmark, write_scaling_csv
        from .config import load_config

        cfg = load_config(args.config)
        ranks = [int(p) for p in args.ranks.split(",")]
        rows = scaling_benchmark(cfg, ranks, mode=args.mode)
        write_scaling_csv(args.out, rows)
        for row in rows:
            print(
                f"P={row['ranks']}: wall={row['wall']:.3f}s "
                f"per-step={row['per_step']*1e3:.2f}ms "
                f"parallel-phases={row['parallel_phases']:.3f}s"
            )
        return 0

    # converge
    from .integrators import convergence_study
    from .mesh import Forest, Rectangle
    from .velocity import Constant, RigidRotation, Shear

    field = {
        "rotation": RigidRotation(omega=1.0, center=(0.0, 0.0)),
        "shear": Shear(gamma=0.3),
        "constant": Constant((0.05, -0.03)),
    }[args.field]
    forest = Forest(Rectangle(-1.0, 1.0, -1.0, 1.0), 8, 8)
    T = args.t_final
    if args.dts:
        dts = [float(s) for s in args.dts.split(",")]
    else:
        dts = [T / 8 / 2**k for k in range(5)]
    seeds = np.array([[0.5, 0.0], [0.3, 0.4], [-0.2, 0.6], [0.0, -0.7]])
    errors, q = convergence_study(forest, field, args.scheme, dts, T, seeds)
    for dt, err in zip(dts, errors):
        print(f"dt={dt:.6g}  error={err:.6e}")
    print("observed order:", "exact (round-off)" if q is None else f"{q:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
