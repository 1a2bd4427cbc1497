"""Space-filling-curve partitioning, weighted load balance, and migration.

Leaves are ordered along the forest's Morton traversal; each rank owns a
contiguous range of that sequence.  Cell cost is 1 + W * particles, where W
is the per-particle cost factor; the midpoint rule assigns leaf i to rank
floor((prefix + cost_i/2) / ideal).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import CellKey, Forest
from .store import ParticleData, Store
from .transport import deserialize_particles, serialize_particle


class PartitionError(Exception):
    pass


def morton_sequence(forest: Forest) -> list[CellKey]:
    """Leaf keys in deterministic space-filling-curve order."""
    return [cell.key for cell in forest.leaves]


def partition(costs, n_ranks: int) -> np.ndarray:
    """Owner rank per leaf, contiguous in Morton order, by the midpoint rule."""
    if n_ranks < 1:
        raise PartitionError("need at least one rank")
    costs = np.asarray(costs, dtype=float)
    if np.any(costs < 0):
        raise PartitionError("leaf costs must be non-negative")
    total = float(costs.sum())
    if len(costs) == 0:
        return np.zeros(0, dtype=np.int64)
    if total <= 0.0:
        raise PartitionError("total cost must be positive")
    ideal = total / n_ranks
    mids = np.cumsum(costs) - 0.5 * costs
    owners = np.minimum(n_ranks - 1, np.floor(mids / ideal).astype(np.int64))
    return np.maximum.accumulate(owners)  # guard monotonicity against fp noise


class RankTopology:
    """Ownership ranges, neighbor sets, and ghost layers for simulated ranks."""

    def __init__(self, forest: Forest, leaf_owners: np.ndarray, n_ranks: int):
        leaf_owners = np.asarray(leaf_owners, dtype=np.int64)
        if len(leaf_owners) != forest.n_leaves:
            raise PartitionError("owner array does not match the leaf count")
        self.forest = forest
        self.n_ranks = n_ranks
        self.leaf_owners = leaf_owners
        for pos, cell in enumerate(forest.leaves):
            cell.owner_rank = int(leaf_owners[pos])

        self.owned_positions = [
            np.flatnonzero(leaf_owners == r) for r in range(n_ranks)
        ]
        self.neighbor_sets: list[set[int]] = [set() for _ in range(n_ranks)]
        ghosts: list[set[int]] = [set() for _ in range(n_ranks)]
        boundary: dict[tuple[int, int], set[int]] = {}
        for pos in range(forest.n_leaves):
            a = int(leaf_owners[pos])
            for other in forest._neighbor_pos[pos]:
                b = int(leaf_owners[other])
                if a == b:
                    continue
                self.neighbor_sets[a].add(b)
                ghosts[a].add(other)
                boundary.setdefault((b, a), set()).add(other)
        self.ghost_positions = [sorted(g) for g in ghosts]
        self._boundary = {
            pair: sorted(forest.leaves[p].key for p in positions)
            for pair, positions in boundary.items()
        }
        for r in range(n_ranks):
            for pos in self.ghost_positions[r]:
                forest.leaves[pos].is_ghost = True

    def owned_keys(self, rank: int) -> list[CellKey]:
        return [self.forest.leaves[p].key for p in self.owned_positions[rank]]

    def ghost_keys(self, rank: int) -> list[CellKey]:
        return [self.forest.leaves[p].key for p in self.ghost_positions[rank]]

    def boundary_keys(self, rank: int, neighbor: int) -> list[CellKey]:
        """Leaves owned by `rank` that lie in `neighbor`'s ghost layer."""
        return self._boundary.get((rank, neighbor), [])

    def owner_of(self, key: CellKey) -> int:
        return int(self.leaf_owners[self.forest.leaf_pos[key]])


def make_topology(forest: Forest, n_ranks: int, costs=None) -> RankTopology:
    if costs is None:
        costs = np.ones(forest.n_leaves)
    return RankTopology(forest, partition(costs, n_ranks), n_ranks)


def leaf_costs(forest: Forest, stores, weight: float) -> np.ndarray:
    """Per-leaf cost 1 + W * particles, aggregated over all rank stores."""
    costs = np.ones(forest.n_leaves)
    for store in stores:
        for key, rows in store.iter_cells():
            costs[forest.leaf_pos[key]] += weight * len(rows)
    return costs


# ---------------------------------------------------------------------------
# migration with repartitioning
# ---------------------------------------------------------------------------


def repartition_and_migrate(
    stores: list[Store], forest: Forest, topology: RankTopology, weight: float
) -> RankTopology:
    """Repartition leaves by weighted cost and ship particles with their cells.

    Particle payloads ride along as wire records in one bulk transfer per
    rank pair.  Returns the new topology; stores are updated in place.
    """
    costs = leaf_costs(forest, stores, weight)
    new_owners = partition(costs, topology.n_ranks)
    stride = stores[0].stride if stores else 0

    # bulk transfers keyed by (old owner, new owner)
    transfers: dict[tuple[int, int], bytearray] = {}
    for pos in range(forest.n_leaves):
        old = int(topology.leaf_owners[pos])
        new = int(new_owners[pos])
        if old == new:
            continue
        key = forest.leaves[pos].key
        buf = transfers.setdefault((old, new), bytearray())
        store = stores[old]
        for view in store.particles_in_cell(key):
            buf.extend(serialize_particle(view.data(), key, stride))
        for row in store.rows_in_cell(key):
            store.release_row(key, row)

    for (old, new), buf in sorted(transfers.items()):
        pairs = deserialize_particles(bytes(buf), stride)
        pairs.sort(key=lambda kp: kp[0])
        for key, record in pairs:
            stores[new].insert(key, record)

    return RankTopology(forest, new_owners, topology.n_ranks)


# ---------------------------------------------------------------------------
# particle redistribution under refine / coarsen
# ---------------------------------------------------------------------------

_QUADRANT_OFFSET = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])


def child_quadrant(ref: np.ndarray) -> int:
    """Child whose reference quadrant contains a parent reference location
    (boundaries go to the lower-index child)."""
    return (1 if ref[0] > 0.5 else 0) + 2 * (1 if ref[1] > 0.5 else 0)


def refine_transfer(store: Store, old_key: CellKey, new_forest: Forest) -> None:
    """Reassign one refined leaf's particles to the containing children."""
    rows = store.rows_in_cell(old_key)
    if not rows:
        return
    pool = store.pool
    for row in rows:
        ref = pool.ref[row]
        q = child_quadrant(ref)
        pool.ref[row] = 2.0 * ref - _QUADRANT_OFFSET[q]
        store.detach_row(old_key, row)
        store.attach_row(old_key.child(q), row)


def coarsen_transfer(store: Store, child_keys, parent_key: CellKey) -> None:
    """Merge sibling leaves' particles into the parent."""
    pool = store.pool
    for key in sorted(child_keys):
        q = key.quadrant
        for row in store.rows_in_cell(key):
            pool.ref[row] = 0.5 * (pool.ref[row] + _QUADRANT_OFFSET[q])
            store.detach_row(key, row)
            store.attach_row(parent_key, row)


def apply_mesh_change(store: Store, correspondence, new_forest: Forest) -> None:
    """Redistribute a rank's particles after refine/coarsen, using the old->new
    leaf correspondence."""
    coarsen_groups: dict[CellKey, list[CellKey]] = {}
    for old_key, new_keys in correspondence.items():
        if not store.rows_in_cell(old_key):
            continue
        if len(new_keys) == 4:
            refine_transfer(store, old_key, new_forest)
        elif new_keys[0] != old_key:
            coarsen_groups.setdefault(new_keys[0], []).append(old_key)
    for parent, children in coarsen_groups.items():
        coarsen_transfer(store, children, parent)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def imbalance_report(stores, topology: RankTopology, weight: float) -> dict:
    """Per-rank cells/particles/combined cost and their max/mean ratios."""
    cells = np.array(
        [len(topology.owned_positions[r]) for r in range(topology.n_ranks)],
        dtype=float,
    )
    particles = np.array([float(len(s)) for s in stores])
    cost = cells + weight * particles

    def ratio(v):
        mean = v.mean()
        return float(v.max() / mean) if mean > 0 else 1.0

    return {
        "cells": cells,
        "particles": particles,
        "cost": cost,
        "cell_ratio": ratio(cells),
        "particle_ratio": ratio(particles),
        "cost_ratio": ratio(cost),
    }


def dump_partition(path, forest: Forest, topology: RankTopology, stores, weight: float):
    """CSV `leaf_morton_rank,level,index,owner,particles,cost`."""
    counts = np.zeros(forest.n_leaves, dtype=np.int64)
    for store in stores:
        for key, rows in store.iter_cells():
            counts[forest.leaf_pos[key]] += len(rows)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("leaf_morton_rank,level,index,owner,particles,cost\n")
        for pos, cell in enumerate(forest.leaves):
            cost = 1.0 + weight * counts[pos]
            fh.write(
                f"{pos},{cell.key.level},{cell.key.index},"
                f"{topology.leaf_owners[pos]},{counts[pos]},{cost}\n"
            )
