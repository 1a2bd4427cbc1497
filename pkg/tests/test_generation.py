"""Initial particle population: planning, samplers, and id bookkeeping."""

import numpy as np
import pytest
from scipy import stats as sps

from picforest.generation import (
    GenerationError,
    generate_random,
    insert_prescribed,
    insert_reference_per_cell,
    plan_generation,
    rank_rng,
    sample_in_cell_mh,
    sample_in_cell_rejection,
    sample_in_cell_rejection_batch,
)
from picforest.mesh import Cell, CellKey, Rectangle, build_coarse
from picforest.partition import make_topology
from picforest.store import Store

UNIT = Rectangle(0.0, 1.0, 0.0, 1.0)


def unit_forest(nx=4, ny=4):
    return build_coarse(UNIT, nx, ny)


def owned_lists(forest, n_ranks):
    topo = make_topology(forest, n_ranks)
    return [sorted(topo.owned_keys(r)) for r in range(n_ranks)], topo


UNIFORM = lambda x: 1.0  # noqa: E731


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("n_ranks", [1, 2, 3, 4])
@pytest.mark.parametrize("n_global", [0, 1, 97, 1000])
def test_plan_counts_sum_exactly_and_ids_are_contiguous(n_ranks, n_global):
    forest = unit_forest()
    owned, _ = owned_lists(forest, n_ranks)
    plans = plan_generation(forest, owned, UNIFORM, n_global)
    assert sum(p.count for p in plans) == n_global
    start = 0
    for p in plans:
        assert p.start_id == start
        start += p.count


def test_plan_weights_follow_density():
    forest = unit_forest(2, 1)  # two cells, left [0,.5) and right [.5,1)
    owned = [[forest.leaves[0].key], [forest.leaves[1].key]]
    density = lambda x: 3.0 if x[0] < 0.5 else 1.0  # noqa: E731
    plans = plan_generation(forest, owned, density, 4000)
    assert plans[0].count == 3000
    assert plans[1].count == 1000


def test_plan_rejects_negative_or_zero_density():
    forest = unit_forest(2, 2)
    owned, _ = owned_lists(forest, 1)
    with pytest.raises(GenerationError):
        plan_generation(forest, owned, lambda x: -1.0, 10)
    with pytest.raises(GenerationError):
        plan_generation(forest, owned, lambda x: 0.0, 10)


# ---------------------------------------------------------------------------
# in-cell samplers
# ---------------------------------------------------------------------------


def test_rejection_on_rectangle_accepts_first_draw():
    cell = unit_forest(1, 1).leaves[0]
    rng_a = np.random.default_rng(0)
    rng_b = np.random.default_rng(0)
    loc, ref = sample_in_cell_rejection(cell, rng_a)
    first = rng_b.random(2)  # the only draw consumed
    assert np.allclose(loc, first)
    assert rng_a.random() == rng_b.random()  # streams stayed in sync


def _skewed_cell():
    verts = np.array([[0.0, 0.0], [1.0, 0.3], [0.2, 1.0], [1.5, 1.6]])
    return Cell(CellKey(0, 0), verts, 0, 0, 0, 0)


def test_rejection_skewed_cell_uniform_in_reference_area():
    cell = _skewed_cell()
    rng = np.random.default_rng(42)
    locs, refs = sample_in_cell_rejection_batch(cell, 100_000, rng)
    # all 8x8 reference bins occupied
    hist, _, _ = np.histogram2d(refs[:, 0], refs[:, 1], bins=8, range=[[0, 1], [0, 1]])
    assert (hist > 0).all()
    # chi-square against physical-area weights per reference bin
    from picforest.mesh import mapping_jacobian

    centers = (np.arange(8) + 0.5) / 8
    weights = np.empty((8, 8))
    for i, xi in enumerate(centers):
        for j, eta in enumerate(centers):
            weights[i, j] = abs(np.linalg.det(mapping_jacobian(cell.vertices, (xi, eta))))
    expected = weights / weights.sum() * hist.sum()
    chi2 = ((hist - expected) ** 2 / expected).sum()
    assert chi2 < sps.chi2.ppf(0.99, 63)


def test_rejection_batch_matches_scalar_on_rectangles():
    cell = unit_forest(2, 2).leaves[1]
    locs, refs = sample_in_cell_rejection_batch(cell, 10, np.random.default_rng(3))
    back = np.array([cell.map_to_reference(p) for p in locs])
    assert np.allclose(back, refs, atol=1e-12)


def test_degenerate_sliver_hits_attempt_cap():
    # thin parallelogram along the box diagonal: cell-to-bounding-box area
    # ratio ~2e-5, far below the 1e-4 regime the cap is meant to catch
    d = 1e-5
    verts = np.array([[0.0, 0.0], [1.0, 1.0], [-d, d], [1.0 - d, 1.0 + d]])
    cell = Cell(CellKey(0, 0), verts, 0, 0, 0, 0)
    with pytest.raises(GenerationError):
        sample_in_cell_rejection_batch(cell, 100, np.random.default_rng(0))


def test_mh_respects_zero_density_region():
    cell = unit_forest(1, 1).leaves[0]
    density = lambda x: 0.0 if x[0] < 0.5 else 1.0  # noqa: E731
    samples = sample_in_cell_mh(cell, density, 500, np.random.default_rng(5))
    for _, ref in samples:
        assert ref[0] >= 0.5


def test_mh_errors_when_density_vanishes_everywhere_nearby():
    cell = unit_forest(1, 1).leaves[0]
    with pytest.raises(GenerationError):
        sample_in_cell_mh(cell, lambda x: 0.0, 10, np.random.default_rng(0))


def test_mh_uniform_density_matches_rejection_sampler():
    """Two-sample chi-square between MH and rejection samples, uniform density."""
    cell = unit_forest(1, 1).leaves[0]
    mh = np.array([ref for _, ref in sample_in_cell_mh(cell, UNIFORM, 20_000, np.random.default_rng(7))])
    _, rej = sample_in_cell_rejection_batch(cell, 20_000, np.random.default_rng(8))
    bins = 5
    h1, _, _ = np.histogram2d(mh[:, 0], mh[:, 1], bins=bins, range=[[0, 1], [0, 1]])
    h2, _, _ = np.histogram2d(rej[:, 0], rej[:, 1], bins=bins, range=[[0, 1], [0, 1]])
    k1 = np.sqrt(h2.sum() / h1.sum())
    k2 = np.sqrt(h1.sum() / h2.sum())
    chi2 = (((k1 * h1 - k2 * h2) ** 2) / (h1 + h2)).sum()
    dof = bins * bins - 1
    assert chi2 < sps.chi2.ppf(0.99, dof)


# ---------------------------------------------------------------------------
# rank-level generation
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("n_ranks", [1, 2, 4])
def test_generate_random_exact_count_and_unique_ids(n_ranks):
    forest = unit_forest()
    owned, _ = owned_lists(forest, n_ranks)
    plans = plan_generation(forest, owned, UNIFORM, 5000)
    stores = [Store(stride=0) for _ in range(n_ranks)]
    ids = []
    for r in range(n_ranks):
        generate_random(stores[r], forest, plans[r], UNIFORM, rank_rng(123, r))
        ids.extend(v.id for _, v in stores[r])
    assert len(ids) == 5000
    assert sorted(ids) == list(range(5000))


def test_generate_random_particles_live_in_their_cells():
    forest = unit_forest()
    owned, _ = owned_lists(forest, 2)
    plans = plan_generation(forest, owned, UNIFORM, 300)
    store = Store(stride=0)
    generate_random(store, forest, plans[0], UNIFORM, rank_rng(9, 0))
    for key, view in store:
        cell = forest.leaf(key)
        ref = cell.map_to_reference(view.location)
        assert ref is not None


def test_generate_random_uniform_density_chi_square_per_cell():
    forest = unit_forest(4, 4)
    owned, _ = owned_lists(forest, 1)
    plans = plan_generation(forest, owned, UNIFORM, 100_000)
    store = Store(stride=0)
    generate_random(store, forest, plans[0], UNIFORM, rank_rng(2024, 0))
    counts = np.array([len(rows) for _, rows in store.iter_cells()])
    expected = 100_000 / forest.n_leaves
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < sps.chi2.ppf(0.99, forest.n_leaves - 1)


def test_insert_prescribed_assigns_ids_by_position_index():
    forest = unit_forest(2, 2)
    owned, topo = owned_lists(forest, 2)
    points = np.array([[0.1, 0.1], [0.9, 0.9], [0.6, 0.1], [1.7, 0.5]])
    totals = 0
    seen = {}
    for r in range(2):
        store = Store(stride=0)
        inserted, skipped = insert_prescribed(store, forest, owned[r], points)
        totals += inserted
        for _, v in store:
            seen[v.id] = v.location.copy()
    assert totals == 3  # the point outside the domain is never inserted
    for pid, loc in seen.items():
        assert np.array_equal(loc, points[pid])


def test_insert_reference_per_cell_counts_and_positions():
    forest = unit_forest(2, 2)
    refs = [(0.25, 0.25), (0.75, 0.75)]
    store = Store(stride=0)
    n = insert_reference_per_cell(store, forest, forest.leaf_keys(), refs, start_id=10)
    assert n == 8
    assert sorted(v.id for _, v in store) == list(range(10, 18))
    with pytest.raises(GenerationError):
        insert_reference_per_cell(store, forest, forest.leaf_keys(), [(1.5, 0.0)], 0)
