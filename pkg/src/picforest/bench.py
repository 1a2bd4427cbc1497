"""Strong/weak scaling benchmark over simulated rank counts."""

from __future__ import annotations

import copy
import time

import numpy as np

from .config import RunConfig
from .harness import Simulation
from .runtime import ENGINES

# phases whose per-step cost should shrink with more ranks in strong scaling
PARALLEL_PHASES = ("advect", "sort", "exchange")


def phase_totals(sim: Simulation) -> dict[str, float]:
    """Wall time per phase: max over ranks of that rank's summed duration
    (ranks run concurrently, so the slowest rank sets the pace)."""
    per_rank: dict[str, list[float]] = {}
    for rank, state in enumerate(sim.ranks):
        sums: dict[str, float] = {}
        for _, phase, seconds in state.timings:
            sums[phase] = sums.get(phase, 0.0) + seconds
        for phase, total in sums.items():
            per_rank.setdefault(phase, []).append(total)
    return {phase: max(vals) for phase, vals in per_rank.items()}


def scaling_benchmark(
    base: RunConfig, rank_counts, mode: str = "strong", engine: str = "threaded"
):
    """Run the config at each rank count and tabulate per-phase wall times.

    strong: problem size fixed; weak: particle count (and mesh cells, by
    doubling nx then ny alternately) scale with P so per-rank load stays
    near-constant.  Returns a list of row dicts.
    """
    if mode not in ("strong", "weak"):
        raise ValueError(f"mode must be strong or weak, not {mode!r}")
    rows = []
    for p in rank_counts:
        cfg = copy.deepcopy(base)
        cfg.ranks = int(p)
        if mode == "weak":
            cfg.generator_count = base.generator_count * int(p)
            nx, ny = base.mesh_nx, base.mesh_ny
            doublings = int(np.log2(p)) if p > 1 else 0
            for k in range(doublings):
                if k % 2 == 0:
                    nx *= 2
                else:
                    ny *= 2
            cfg.mesh_nx, cfg.mesh_ny = nx, ny
        t0 = time.perf_counter()
        sim = Simulation(cfg, out_dir=None, engine=engine)
        programs = [sim._rank_program(r) for r in range(cfg.ranks)]
        ENGINES[engine](programs, sim._collective)
        wall = time.perf_counter() - t0
        phases = phase_totals(sim)
        row = {
            "ranks": int(p),
            "mode": mode,
            "steps": cfg.steps,
            "particles": sim.total_generated,
            "cells": sim.forest.n_leaves,
            "wall": wall,
            "per_step": wall / max(cfg.steps, 1),
            "parallel_phases": sum(phases.get(ph, 0.0) for ph in PARALLEL_PHASES),
        }
        row.update({f"phase_{k}": v for k, v in sorted(phases.items())})
        rows.append(row)
    return rows


def write_scaling_csv(path, rows) -> None:
    cols: list[str] = []
    for row in rows:
        for key in row:
            if key not in cols:
                cols.append(key)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(row.get(c, "")) for c in cols) + "\n")
