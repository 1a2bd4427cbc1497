"""SFC partitioning, rank topology, migration, and mesh-change transfers."""

import numpy as np
import pytest

from picforest.mesh import CellKey, Rectangle, build_coarse
from picforest.partition import (
    PartitionError,
    apply_mesh_change,
    child_quadrant,
    coarsen_transfer,
    dump_partition,
    imbalance_report,
    leaf_costs,
    make_topology,
    morton_sequence,
    partition,
    refine_transfer,
    repartition_and_migrate,
)
from picforest.store import ParticleData, Store

UNIT = Rectangle(0.0, 1.0, 0.0, 1.0)


def unit_forest(nx=4, ny=4):
    return build_coarse(UNIT, nx, ny)


# ---------------------------------------------------------------------------
# the midpoint rule
# ---------------------------------------------------------------------------


def test_partition_equal_costs_split_evenly():
    owners = partition(np.ones(8), 4)
    assert list(owners) == [0, 0, 1, 1, 2, 2, 3, 3]


def test_partition_midpoint_rule_on_uneven_costs():
    # cost prefix midpoints decide ownership: a heavy first leaf occupies
    # rank 0 alone
    owners = partition(np.array([10.0, 1, 1, 1, 1]), 2)
    assert list(owners) == [0, 1, 1, 1, 1]


def test_partition_owners_monotonic_and_all_ranks_possible():
    rng = np.random.default_rng(3)
    costs = rng.random(100) + 0.01
    owners = partition(costs, 7)
    assert (np.diff(owners) >= 0).all()
    assert owners[0] == 0 and owners[-1] == 6


def test_partition_errors():
    with pytest.raises(PartitionError):
        partition(np.ones(4), 0)
    with pytest.raises(PartitionError):
        partition(np.array([-1.0, 1.0]), 2)


# ---------------------------------------------------------------------------
# topology
# ---------------------------------------------------------------------------


def test_topology_covers_all_leaves_disjointly():
    f = unit_forest()
    topo = make_topology(f, 3)
    seen = set()
    for r in range(3):
        owned = topo.owned_keys(r)
        assert not (seen & set(owned))
        seen |= set(owned)
    assert seen == set(f.leaf_keys())


def test_owned_ranges_are_contiguous_on_the_sfc():
    f = unit_forest()
    topo = make_topology(f, 4)
    seq = morton_sequence(f)
    owners = [topo.owner_of(k) for k in seq]
    # non-decreasing along the space-filling curve
    assert all(a <= b for a, b in zip(owners, owners[1:]))


def test_ghosts_are_vertex_neighbors_of_owned_cells():
    f = unit_forest()
    topo = make_topology(f, 2)
    for r in range(2):
        owned = set(topo.owned_keys(r))
        ghosts = set(topo.ghost_keys(r))
        assert not (owned & ghosts)
        for g in ghosts:
            nbs = {c.key for c in f.vertex_neighbors(f.leaf(g))}
            assert nbs & owned


def test_boundary_keys_match_ghosts_of_the_other_rank():
    f = unit_forest()
    topo = make_topology(f, 2)
    assert set(topo.boundary_keys(0, 1)) == {
        k for k in topo.ghost_keys(1) if topo.owner_of(k) == 0
    }


# ---------------------------------------------------------------------------
# weighted repartitioning and migration
# ---------------------------------------------------------------------------


def _populated(f, topo, per_cell_rank0=9):
    """Rank-0 cells heavily loaded, others empty: a clear imbalance."""
    stores = [Store(stride=0) for _ in range(len(topo.neighbor_sets))]
    pid = 0
    for key in sorted(topo.owned_keys(0)):
        cell = f.leaf(key)
        for _ in range(per_cell_rank0):
            stores[0].insert(key, ParticleData(pid, cell.center.copy(), np.array([0.5, 0.5])))
            pid += 1
    return stores


def test_leaf_costs_weighting():
    f = unit_forest(2, 2)
    topo = make_topology(f, 1)
    stores = _populated(f, topo, per_cell_rank0=4)
    assert np.allclose(leaf_costs(f, stores, 0.0), 1.0)
    assert np.allclose(leaf_costs(f, stores, 0.5), 3.0)


def test_repartition_moves_particles_with_their_cells():
    f = unit_forest(4, 4)
    topo = make_topology(f, 4)
    stores = _populated(f, topo)
    before = sorted(
        (v.id, tuple(v.location)) for s in stores for _, v in s
    )
    new_topo = repartition_and_migrate(stores, f, topo, weight=1.0)
    after = sorted((v.id, tuple(v.location)) for s in stores for _, v in s)
    assert before == after  # nothing lost or duplicated
    for r in range(4):
        for key, _ in stores[r]:
            assert new_topo.owner_of(key) == r  # everyone holds only owned cells


def test_weighted_repartition_improves_particle_balance():
    f = unit_forest(4, 4)
    topo = make_topology(f, 4)
    stores = _populated(f, topo)
    report0 = imbalance_report(stores, topo, weight=1.0)
    new_topo = repartition_and_migrate(stores, f, topo, weight=1.0)
    report1 = imbalance_report(stores, new_topo, weight=1.0)
    assert report1["cost_ratio"] < report0["cost_ratio"]


def test_dump_partition_csv(tmp_path):
    f = unit_forest(2, 2)
    topo = make_topology(f, 2)
    stores = _populated(f, topo, per_cell_rank0=1)
    path = tmp_path / "part.csv"
    dump_partition(path, f, topo, stores, weight=0.5)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "leaf_morton_rank,level,index,owner,particles,cost"
    assert len(lines) == 1 + f.n_leaves


# ---------------------------------------------------------------------------
# refinement / coarsening transfers
# ---------------------------------------------------------------------------


def test_child_quadrant_boundaries_prefer_lower_child():
    assert child_quadrant(np.array([0.25, 0.25])) == 0
    assert child_quadrant(np.array([0.75, 0.25])) == 1
    assert child_quadrant(np.array([0.25, 0.75])) == 2
    assert child_quadrant(np.array([0.75, 0.75])) == 3
    assert child_quadrant(np.array([0.5, 0.5])) == 0  # ties go low


def test_refine_transfer_preserves_physical_positions():
    f = unit_forest(2, 2)
    store = Store(stride=0)
    key = f.leaves[0].key
    cell = f.leaf(key)
    pts = [cell.map_to_real(np.array(r)) for r in [(0.1, 0.1), (0.8, 0.2), (0.3, 0.9), (0.6, 0.7)]]
    for pid, p in enumerate(pts):
        store.insert(key, ParticleData(pid, p, cell.map_to_reference(p)))
    new_f, corr = f.refine([key])
    apply_mesh_change(store, corr, new_f)
    assert len(store) == 4
    for k, v in store:
        child = new_f.leaf(k)
        assert k.parent() == key
        ref = child.map_to_reference(v.location)
        assert ref is not None
        assert np.allclose(v.reference_location, ref, atol=1e-12)


def test_coarsen_transfer_preserves_physical_positions():
    f0 = unit_forest(2, 2)
    key = f0.leaves[0].key
    f, _ = f0.refine([key])
    store = Store(stride=0)
    pid = 0
    for child in [c for c in f.leaves if c.key.level == 1]:
        p = child.center.copy()
        store.insert(child.key, ParticleData(pid, p, child.map_to_reference(p)))
        pid += 1
    new_f, corr = f.coarsen([c.key for c in f.leaves if c.key.level == 1])
    apply_mesh_change(store, corr, new_f)
    assert len(store) == 4
    for k, v in store:
        assert k == key
        parent = new_f.leaf(k)
        assert np.allclose(
            parent.map_to_real(v.reference_location), v.location, atol=1e-12
        )


def test_refine_then_coarsen_reference_roundtrip():
    f = unit_forest(1, 1)
    store = Store(stride=0)
    key = f.leaves[0].key
    ref0 = np.array([0.3, 0.65])
    cell = f.leaf(key)
    store.insert(key, ParticleData(0, cell.map_to_real(ref0), ref0.copy()))
    f1, corr = f.refine([key])
    apply_mesh_change(store, corr, f1)
    f2, corr2 = f1.coarsen([key.child(q) for q in range(4)])
    apply_mesh_change(store, corr2, f2)
    (k, v), = list(store)
    assert k == key
    assert np.allclose(v.reference_location, ref0, atol=1e-14)


def test_direct_transfer_helpers_agree_with_apply_mesh_change():
    f = unit_forest(1, 1)
    key = f.leaves[0].key
    cell = f.leaf(key)
    ref0 = np.array([0.7, 0.2])

    s1 = Store(stride=0)
    s1.insert(key, ParticleData(0, cell.map_to_real(ref0), ref0.copy()))
    f1, _ = f.refine([key])
    refine_transfer(s1, key, f1)
    (k1, v1), = list(s1)

    s2 = Store(stride=0)
    k_child = key.child(1)
    child = f1.leaf(k_child)
    refc = np.array([0.4, 0.4])
    s2.insert(k_child, ParticleData(1, child.map_to_real(refc), refc.copy()))
    coarsen_transfer(s2, [key.child(q) for q in range(4)], key)
    (k2, v2), = list(s2)

    assert k1 == key.child(child_quadrant(ref0))
    assert k2 == key
    assert np.allclose(v1.reference_location, 2 * ref0 - np.array([1.0, 0.0]), atol=1e-14)
    assert np.allclose(v2.reference_location, (refc + np.array([1.0, 0.0])) / 2, atol=1e-14)
