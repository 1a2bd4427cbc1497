"""Cell-sorted particle store and the fixed-stride property pool."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from picforest.mesh import CellKey
from picforest.store import ParticleData, PropertyPool, Store, StoreError


def make_particle(pid, x=0.5, y=0.5, props=None):
    return ParticleData(pid, np.array([x, y]), np.array([0.5, 0.5]), props)


def test_insert_and_iterate_in_key_order():
    s = Store(stride=0)
    a, b, c = CellKey(0, 3), CellKey(0, 1), CellKey(1, 2)
    s.insert(a, make_particle(1))
    s.insert(b, make_particle(2))
    s.insert(c, make_particle(3))
    assert [key for key, _ in s] == sorted([a, b, c])
    assert len(s) == 3


def test_within_cell_insertion_order_preserved():
    s = Store(stride=0)
    key = CellKey(0, 0)
    for pid in (5, 3, 9):
        s.insert(key, make_particle(pid))
    assert [v.id for v in s.particles_in_cell(key)] == [5, 3, 9]


def test_properties_roundtrip_and_stride_check():
    s = Store(stride=3)
    key = CellKey(0, 0)
    view = s.insert(key, make_particle(1, props=np.array([1.0, 2.0, 3.0])))
    assert np.array_equal(view.properties, [1.0, 2.0, 3.0])
    with pytest.raises(StoreError):
        s.insert(key, make_particle(2, props=np.array([1.0])))


def test_remove_releases_row():
    s = Store(stride=0)
    key = CellKey(0, 0)
    s.insert(key, make_particle(7))
    s.remove(key, 7)
    assert len(s) == 0
    assert key not in dict(s.iter_cells())
    with pytest.raises(StoreError):
        s.remove(key, 7)


def test_pool_grows_and_reuses_slots():
    pool = PropertyPool(stride=1, capacity=16)
    rows = [pool.allocate() for _ in range(40)]
    assert len(set(rows)) == 40
    assert pool.capacity >= 40
    pool.release(rows[0])
    assert pool.allocate() == rows[0]
    with pytest.raises(StoreError):
        pool.release(rows[1]) or pool.release(rows[1])


def test_flat_rows_groups_by_cell():
    s = Store(stride=0)
    s.insert(CellKey(0, 1), make_particle(1))
    s.insert(CellKey(0, 0), make_particle(2))
    s.insert(CellKey(0, 1), make_particle(3))
    keys, rows, cell_index = s.flat_rows()
    assert keys == [CellKey(0, 0), CellKey(0, 1)]
    ids = [int(s.pool.ids[r]) for r in rows]
    assert ids == [2, 1, 3]
    assert list(cell_index) == [0, 1, 1]


def test_bulk_insert_sorted_rejects_unsorted():
    s = Store(stride=0)
    pairs = [(CellKey(0, 1), make_particle(1)), (CellKey(0, 0), make_particle(2))]
    with pytest.raises(StoreError):
        s.bulk_insert_sorted(pairs)


@settings(max_examples=100, deadline=None)
@given(
    moves=st.lists(
        st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=0, max_size=20
    )
)
def test_rebind_groups_matches_per_row_detach_attach(moves):
    """Bulk rebinding must equal the one-row-at-a-time reference semantics."""

    def build():
        s = Store(stride=0)
        rows = {}
        for pid in range(12):
            v = s.insert(CellKey(0, pid % 6), make_particle(pid))
            rows[pid] = v.row
        return s, rows

    s1, rows1 = build()
    s2, rows2 = build()
    assert rows1 == rows2
    # move particle pid -> cell dst for distinct pids
    seen = set()
    triples = []
    for pid, dst in moves:
        if pid in seen:
            continue
        seen.add(pid)
        triples.append((CellKey(0, dst), CellKey(0, pid % 6), rows1[pid]))
    triples.sort(key=lambda t: t[0])

    for new_key, old_key, row in triples:
        s1.detach_row(old_key, row)
    for new_key, old_key, row in triples:
        s1.attach_row(new_key, row)

    removals = {}
    additions = {}
    for new_key, old_key, row in triples:
        removals.setdefault(old_key, []).append(row)
        additions.setdefault(new_key, []).append(row)
    s2.rebind_groups(
        sorted(removals.items()), sorted(additions.items())
    )

    assert [(k, v.id) for k, v in s1] == [(k, v.id) for k, v in s2]


def test_clear_returns_all_rows():
    s = Store(stride=2)
    for pid in range(10):
        s.insert(CellKey(0, pid % 3), make_particle(pid, props=np.zeros(2)))
    s.clear()
    assert len(s) == 0
    assert not s.pool.allocated.any()
