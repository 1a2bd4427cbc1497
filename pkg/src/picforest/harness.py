"""Simulation driver: scenarios, the per-rank step program, and artifacts.

A run builds the mesh and velocity field for the configured scenario,
partitions leaves over P simulated ranks, generates particles, then steps:
integrator substages (with transport after every substage), property
updates, optional ghost refresh + interpolation, periodic repartitioning,
and periodic output.  Artifacts: stats.csv, timings.csv, partition CSVs,
grouped particle dumps, and a config echo.
"""

from __future__ import annotations

import os
import struct
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import generation, integrators, partition, properties, transport
from .config import RunConfig
from .mesh import Annulus, Forest, Rectangle
from .runtime import ENGINES, Network
from .store import ParticleData, Store
from .velocity import (
    Constant,
    DiscreteField,
    RigidRotation,
    Shear,
    UnsteadyGyre,
)


class HarnessError(Exception):
    pass


# ---------------------------------------------------------------------------
# scenario construction
# ---------------------------------------------------------------------------


def build_geometry(cfg: RunConfig):
    if cfg.mesh_geometry == "rectangle":
        x0, x1, y0, y1 = cfg.mesh_extent
        return Rectangle(x0, x1, y0, y1)
    r_inner, r_outer = cfg.mesh_extent[:2]
    return Annulus(r_inner, r_outer)


def build_field(cfg: RunConfig):
    if cfg.velocity_kind == "gyre":
        return UnsteadyGyre(amplitude=cfg.velocity_amplitude, omega_t=0.0)
    if cfg.velocity_kind == "rotation":
        return RigidRotation(omega=cfg.velocity_omega, center=tuple(cfg.velocity_center))
    if cfg.velocity_kind == "shear":
        return Shear(gamma=cfg.velocity_amplitude)
    return Constant(tuple(cfg.velocity_center))


def reference_lattice(per_cell: int) -> np.ndarray:
    """`per_cell` well-spread reference coordinates (centered k x k sublattice)."""
    k = int(np.ceil(np.sqrt(per_cell)))
    pts = [((i + 0.5) / k, (j + 0.5) / k) for j in range(k) for i in range(k)]
    return np.asarray(pts[:per_cell], dtype=float)


def interface_curve(x: float, amplitude: float) -> float:
    """Interface height for the adaptive-interface scenario."""
    return 0.5 + amplitude * np.sin(2.0 * np.pi * x)


def build_forest(cfg: RunConfig) -> Forest:
    forest = Forest(build_geometry(cfg), cfg.mesh_nx, cfg.mesh_ny)
    for _ in range(cfg.mesh_refine_depth):
        if cfg.scenario == "adaptive_interface":
            marked = [
                cell.key
                for cell in forest.leaves
                if _crosses_interface(cell, cfg.mesh_interface_amplitude)
            ]
        else:
            marked = [cell.key for cell in forest.leaves]
        if not marked:
            break
        forest, _ = forest.refine(marked)
    return forest


def _crosses_interface(cell, amplitude: float) -> bool:
    xs = cell.vertices[:, 0]
    ys = cell.vertices[:, 1]
    samples = np.linspace(xs.min(), xs.max(), 5)
    curve = np.array([interface_curve(x, amplitude) for x in samples])
    return bool(curve.min() <= ys.max() and ys.min() <= curve.max())


# ---------------------------------------------------------------------------
# simulation state
# ---------------------------------------------------------------------------


@dataclass
class RankState:
    store: Store
    ghost: Store
    generated: int = 0
    sort_stats: transport.SortStats = dc_field(default_factory=transport.SortStats)
    outboxes: dict = dc_field(default_factory=dict)
    timings: list = dc_field(default_factory=list)  # (step, phase, seconds)


class Simulation:
    def __init__(self, cfg: RunConfig, out_dir=None, engine: str = "lockstep"):
        cfg.validate()
        self.cfg = cfg
        self.out_dir = out_dir
        self.engine = engine
        self.forest = build_forest(cfg)
        self.field = build_field(cfg)
        self.manager = properties.build_manager(
            cfg.properties_plugins,
            scratch_slots=integrators.scheme(cfg.integrator).scratch_slots,
            **cfg.properties_params,
        )
        self.scheme = integrators.scheme(cfg.integrator)
        self.topology = partition.make_topology(self.forest, cfg.ranks)
        self.network = Network()
        self.ranks = [
            RankState(
                Store(stride=self.manager.total_stride),
                Store(stride=self.manager.total_stride),
            )
            for _ in range(cfg.ranks)
        ]
        self.dt = integrators.compute_cfl_dt(self.field, self.forest, cfg.cfl)
        self.t = 0.0
        self.step = 0
        self.total_generated = 0
        self.total_discarded = 0
        self.stats_rows: list[dict] = []
        self._generate()
        if cfg.velocity_discretize:
            # steady Q1 snapshot of the analytic field on this mesh
            self.field = DiscreteField.sample(self.forest, self.field, 0.0, steady=True)

    # -- setup ---------------------------------------------------------------

    def _generate(self) -> None:
        cfg = self.cfg
        owned = [self.topology.owned_keys(r) for r in range(cfg.ranks)]
        if cfg.generator_kind == "random":
            plans = generation.plan_generation(
                self.forest, owned, lambda x: 1.0, cfg.generator_count
            )
        if cfg.generator_kind == "prescribed":
            points = load_prescribed_points(cfg.generator_file)
        if cfg.generator_kind == "reference":
            refs = reference_lattice(cfg.generator_per_cell)
        for rank, state in enumerate(self.ranks):
            if cfg.generator_kind == "reference":
                start = (
                    len(refs) * int(self.topology.owned_positions[rank][0])
                    if len(self.topology.owned_positions[rank])
                    else 0
                )
                n = generation.insert_reference_per_cell(
                    state.store, self.forest, owned[rank], refs, start
                )
            elif cfg.generator_kind == "prescribed":
                n, _ = generation.insert_prescribed(
                    state.store, self.forest, owned[rank], points
                )
            else:
                n = generation.generate_random(
                    state.store,
                    self.forest,
                    plans[rank],
                    lambda x: 1.0,
                    generation.rank_rng(cfg.seed, rank),
                )
            state.generated = n
            self.manager.initialize_all(state.store)
        self.total_generated = sum(s.generated for s in self.ranks)

    # -- per-rank step program -------------------------------------------------

    def _rank_program(self, rank: int):
        cfg = self.cfg
        state = self.ranks[rank]
        mailbox = self.network.mailbox(rank)
        peers = sorted(self.topology.neighbor_sets[rank])
        stride = self.manager.total_stride
        scratch = self.manager.scratch_offset

        def clock(phase, t0):
            state.timings.append((self.step, phase, time.perf_counter() - t0))

        for step in range(cfg.steps):
            step_stats = transport.SortStats()
            for stage in range(self.scheme.n_stages):
                t0 = time.perf_counter()
                integrators.advance_substage(
                    self.scheme, stage, state.store, self.forest, self.field,
                    self.t, self.dt, scratch,
                )
                clock("advect", t0)
                t0 = time.perf_counter()
                stats, outboxes = transport.sort_into_cells(
                    state.store, self.forest, self.topology, rank
                )
                step_stats.merge(stats)
                transport.exchange_post(mailbox, peers, outboxes, stride)
                clock("sort", t0)
                yield "exchange"
                t0 = time.perf_counter()
                peers = sorted(self.topology.neighbor_sets[rank])
                received = transport.exchange_collect(mailbox, rank, peers, stride)
                step_stats.merge(
                    transport.insert_received(
                        state.store, self.forest, received, self.topology, rank
                    )
                )
                clock("exchange", t0)
            t0 = time.perf_counter()
            self.manager.update_all(
                state.store, self.forest, self.field, self.t + self.dt, self.dt
            )
            clock("properties", t0)
            state.sort_stats = step_stats

            output_step = (step + 1) % cfg.output_cadence == 0 or step + 1 == cfg.steps
            if output_step and cfg.interpolation_property:
                t0 = time.perf_counter()
                transport.exchange_post(
                    mailbox, peers,
                    transport.ghost_outboxes(state.store, self.topology, rank),
                    stride,
                )
                clock("interpolate", t0)
                yield "ghost"
                t0 = time.perf_counter()
                state.ghost.clear()
                transport.insert_ghosts(
                    state.ghost,
                    transport.exchange_collect(mailbox, rank, peers, stride),
                )
                clock("interpolate", t0)

            yield "collective:ledger"

            if cfg.ranks > 1 and (step + 1) % cfg.partition_cadence == 0:
                yield "collective:repartition"
                peers = sorted(self.topology.neighbor_sets[rank])
            if output_step and self.out_dir is not None:
                t0 = time.perf_counter()
                self.manager.sample_outputs(
                    state.store, self.forest, self.field, self.t + self.dt
                )
                clock("output", t0)
                yield "collective:output"

    # -- collectives -----------------------------------------------------------

    def _collective(self, tag: str) -> None:
        if tag == "collective:ledger":
            self._end_of_step()
        elif tag == "collective:repartition":
            t0 = time.perf_counter()
            stores = [s.store for s in self.ranks]
            self.topology = partition.repartition_and_migrate(
                stores, self.forest, self.topology, self.cfg.partition_weight
            )
            self.ranks[0].timings.append(
                (self.step, "repartition", time.perf_counter() - t0)
            )
        elif tag == "collective:output":
            t0 = time.perf_counter()
            self.write_outputs()
            self.ranks[0].timings.append(
                (self.step, "output", time.perf_counter() - t0)
            )
        else:  # pragma: no cover
            raise HarnessError(f"unknown collective {tag!r}")

    def _end_of_step(self) -> None:
        self.step += 1
        self.t += self.dt
        discarded = sum(
            s.sort_stats.discarded_out_of_domain + s.sort_stats.discarded_unreachable
            for s in self.ranks
        )
        self.total_discarded += discarded
        alive = sum(len(s.store) for s in self.ranks)
        if alive + self.total_discarded != self.total_generated:
            raise HarnessError(
                f"conservation violated at step {self.step}: generated "
                f"{self.total_generated} != alive {alive} + discarded "
                f"{self.total_discarded}"
            )
        merged = transport.SortStats()
        for s in self.ranks:
            merged.merge(s.sort_stats)
        self.stats_rows.append(
            {
                "step": self.step,
                "time": self.t,
                "alive": alive,
                "discarded_total": self.total_discarded,
                "kept": merged.kept,
                "moved_local": merged.moved_local,
                "sent": merged.sent,
                "received": merged.received,
                "cross_cell_moves": merged.cross_cell_moves,
                "first_candidate_hits": merged.first_candidate_hits,
                "fallback_resorts": merged.fallback_resorts,
            }
        )

    # -- driving ---------------------------------------------------------------

    def run(self) -> None:
        if self.out_dir is not None:
            os.makedirs(self.out_dir, exist_ok=True)
            from .config import dump_config

            with open(os.path.join(self.out_dir, "config.echo"), "w",
                      encoding="utf-8") as fh:
                fh.write(dump_config(self.cfg))
            self.write_outputs()  # initial state
        if self.cfg.steps > 0:
            programs = [self._rank_program(r) for r in range(self.cfg.ranks)]
            ENGINES[self.engine](programs, self._collective)
        if self.out_dir is not None:
            self.write_stats()
            self.write_timings()

    # -- artifacts ---------------------------------------------------------------

    def all_records(self):
        """(id, x, y, props...) rows across ranks, in rank order."""
        rows = []
        for s in self.ranks:
            for key, view in s.store:
                rows.append(
                    (int(view.id), float(view.location[0]), float(view.location[1]))
                    + tuple(float(v) for v in view.properties[: self.manager.stride])
                )
        return rows

    def write_outputs(self) -> None:
        write_particles(
            [s.store for s in self.ranks],
            self.cfg.output_groups,
            self.step,
            self.out_dir,
            self.manager.stride,
            binary=self.cfg.output_binary,
        )
        partition.dump_partition(
            os.path.join(self.out_dir, f"partition_{self.step}.csv"),
            self.forest,
            self.topology,
            [s.store for s in self.ranks],
            self.cfg.partition_weight,
        )
        if self.cfg.interpolation_property:
            try:
                values = properties.interpolate_to_mesh(
                    _merged_store([s.store for s in self.ranks], self.manager),
                    None,
                    self.forest,
                    self.cfg.interpolation_scheme,
                    self.cfg.interpolation_property,
                    self.manager,
                )
            except properties.EmptyCellError as exc:
                raise HarnessError(
                    f"interpolation at step {self.step}: {exc}"
                ) from exc
            properties.dump_interpolated(
                os.path.join(self.out_dir, f"interpolated_{self.step}.csv"),
                self.forest,
                values,
            )

    def write_stats(self) -> None:
        path = os.path.join(self.out_dir, "stats.csv")
        cols = [
            "step", "time", "alive", "discarded_total", "kept", "moved_local",
            "sent", "received", "cross_cell_moves", "first_candidate_hits",
            "fallback_resorts",
        ]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for row in self.stats_rows:
                fh.write(",".join(repr(row[c]) for c in cols) + "\n")

    def write_timings(self) -> None:
        path = os.path.join(self.out_dir, "timings.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,rank,phase,seconds\n")
            for rank, state in enumerate(self.ranks):
                for step, phase, seconds in state.timings:
                    fh.write(f"{step},{rank},{phase},{seconds!r}\n")


def _merged_store(stores, manager) -> Store:
    """Single store holding copies of every rank's particles (interpolation
    on the aggregated state; rank-local interpolation would use ghosts)."""
    merged = Store(stride=manager.total_stride)
    for store in stores:
        for key, view in store:
            merged.insert(key, view.data())
    return merged


# ---------------------------------------------------------------------------
# particle output files
# ---------------------------------------------------------------------------

PARTICLE_RECORD = "<q2d"


def write_particles(stores, group_count, step, out_dir, n_props, binary=True):
    """Dump `id,x,y,prop...` rows grouped into contiguous rank blocks."""
    blocks = np.array_split(np.arange(len(stores)), min(group_count, len(stores)))
    codec = struct.Struct(PARTICLE_RECORD + f"{n_props}d")
    for group, ranks in enumerate(blocks):
        rows = []
        for rank in ranks:
            for key, view in stores[rank]:
                rows.append(
                    (int(view.id), float(view.location[0]), float(view.location[1]))
                    + tuple(float(v) for v in view.properties[:n_props])
                )
        csv_path = os.path.join(out_dir, f"particles_{step}_{group}.csv")
        with open(csv_path, "w", encoding="utf-8") as fh:
            header = ",".join(["id", "x", "y"] + [f"prop{i}" for i in range(n_props)])
            fh.write(header + "\n")
            for row in rows:
                fh.write(",".join(repr(v) for v in row) + "\n")
        if binary:
            bin_path = os.path.join(out_dir, f"particles_{step}_{group}.bin")
            with open(bin_path, "wb") as fh:
                for row in rows:
                    fh.write(codec.pack(*row))


def read_particles_csv(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            parts = line.strip().split(",")
            rows.append((int(parts[0]),) + tuple(float(p) for p in parts[1:]))
    return rows


def read_particles_bin(path, n_props):
    codec = struct.Struct(PARTICLE_RECORD + f"{n_props}d")
    rows = []
    with open(path, "rb") as fh:
        payload = fh.read()
    for fields in codec.iter_unpack(payload):
        rows.append((fields[0],) + tuple(fields[1:]))
    return rows


def load_prescribed_points(path) -> np.ndarray:
    """CSV `x,y` (header optional) of requested particle positions."""
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            body = line.strip()
            if not body or body.lower().startswith("x"):
                continue
            xs = body.split(",")
            points.append((float(xs[0]), float(xs[1])))
    return np.asarray(points, dtype=float)


def run(cfg: RunConfig, out_dir=None, engine: str = "lockstep") -> Simulation:
    sim = Simulation(cfg, out_dir=out_dir, engine=engine)
    sim.run()
    return sim
