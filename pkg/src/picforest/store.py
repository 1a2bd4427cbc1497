"""Cell-sorted particle container with fixed-stride property storage.

Particles live in a contiguous arena (the property pool) and are indexed by an
ordered multi-map from cell key to arena rows.  Iteration visits cells in
ascending (level, index) order and particles within a cell in insertion order.
Ghost particles use a second Store of the same type.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .mesh import CellKey


class StoreError(Exception):
    pass


@dataclass
class ParticleData:
    """Plain particle record used for insertion and wire transfer."""

    id: int
    location: np.ndarray
    reference_location: np.ndarray
    properties: np.ndarray | None = None


class PropertyPool:
    """Contiguous arena sliced into fixed chunks of `stride` reals.

    Also hosts the particle id/location/reference arrays so that one arena row
    describes one particle completely.
    """

    def __init__(self, stride: int, capacity: int = 256):
        if stride < 0:
            raise StoreError("property stride must be non-negative")
        self.stride = stride
        capacity = max(capacity, 16)
        self.ids = np.zeros(capacity, dtype=np.uint64)
        self.loc = np.zeros((capacity, 2))
        self.ref = np.zeros((capacity, 2))
        self.props = np.zeros((capacity, stride))
        self.allocated = np.zeros(capacity, dtype=bool)
        self._free: list[int] = list(range(capacity - 1, -1, -1))

    @property
    def capacity(self) -> int:
        return len(self.ids)

    def _grow(self) -> None:
        old = self.capacity
        new = old * 2
        for name in ("ids", "loc", "ref", "props", "allocated"):
            arr = getattr(self, name)
            shape = (new,) + arr.shape[1:]
            grown = np.zeros(shape, dtype=arr.dtype)
            grown[:old] = arr
            setattr(self, name, grown)
        self._free.extend(range(new - 1, old - 1, -1))

    def allocate(self) -> int:
        if not self._free:
            self._grow()
        row = self._free.pop()
        assert not self.allocated[row], "double-assigned pool slot"
        self.allocated[row] = True
        return row

    def release(self, row: int) -> None:
        if not self.allocated[row]:
            raise StoreError(f"releasing unallocated row {row}")
        self.allocated[row] = False
        self._free.append(row)


class ParticleView:
    """Lightweight handle onto one arena row."""

    __slots__ = ("_pool", "row")

    def __init__(self, pool: PropertyPool, row: int):
        self._pool = pool
        self.row = row

    @property
    def id(self) -> int:
        return int(self._pool.ids[self.row])

    @property
    def location(self) -> np.ndarray:
        return self._pool.loc[self.row]

    @location.setter
    def location(self, value):
        self._pool.loc[self.row] = value

    @property
    def reference_location(self) -> np.ndarray:
        return self._pool.ref[self.row]

    @reference_location.setter
    def reference_location(self, value):
        self._pool.ref[self.row] = value

    @property
    def properties(self) -> np.ndarray:
        return self._pool.props[self.row]

    def data(self) -> ParticleData:
        return ParticleData(
            self.id,
            self.location.copy(),
            self.reference_location.copy(),
            self.properties.copy(),
        )


class Store:
    """Ordered multi-map CellKey -> particles, backed by a property pool."""

    def __init__(self, stride: int = 0, pool: PropertyPool | None = None):
        self.pool = pool if pool is not None else PropertyPool(stride)
        self._cells: dict[CellKey, list[int]] = {}
        self._sorted_keys: list[CellKey] | None = []

    # -- bookkeeping -------------------------------------------------------

    @property
    def stride(self) -> int:
        return self.pool.stride

    def size(self) -> int:
        return sum(len(rows) for rows in self._cells.values())

    def __len__(self) -> int:
        return self.size()

    def keys(self) -> list[CellKey]:
        if self._sorted_keys is None:
            self._sorted_keys = sorted(self._cells)
        return self._sorted_keys

    def cell_counts(self) -> dict[CellKey, int]:
        return {k: len(v) for k, v in self._cells.items()}

    # -- insertion / removal -------------------------------------------------

    def _store_row(self, particle: ParticleData) -> int:
        row = self.pool.allocate()
        self.pool.ids[row] = particle.id
        self.pool.loc[row] = particle.location
        self.pool.ref[row] = particle.reference_location
        if particle.properties is not None:
            props = np.asarray(particle.properties, dtype=float)
            if props.shape != (self.stride,):
                raise StoreError(
                    f"expected {self.stride} property values, got {props.shape}"
                )
            self.pool.props[row] = props
        else:
            self.pool.props[row] = 0.0
        return row

    def insert(self, key: CellKey, particle: ParticleData) -> ParticleView:
        row = self._store_row(particle)
        rows = self._cells.get(key)
        if rows is None:
            self._cells[key] = [row]
            self._sorted_keys = None
        else:
            rows.append(row)
        return ParticleView(self.pool, row)

    def bulk_insert_sorted(self, pairs) -> int:
        """Insert (key, ParticleData) pairs pre-sorted by non-decreasing key."""
        last = None
        count = 0
        for key, particle in pairs:
            if last is not None and key < last:
                raise StoreError("bulk_insert_sorted input is not sorted by key")
            last = key
            self.insert(key, particle)
            count += 1
        return count

    def remove(self, key: CellKey, particle_id: int) -> None:
        rows = self._cells.get(key)
        if rows is not None:
            for i, row in enumerate(rows):
                if int(self.pool.ids[row]) == particle_id:
                    rows.pop(i)
                    self.pool.release(row)
                    if not rows:
                        del self._cells[key]
                        self._sorted_keys = None
                    return
        raise StoreError(f"particle {particle_id} not found in cell {key}")

    def detach_row(self, key: CellKey, row: int) -> None:
        """Unlink a row from its cell without releasing the arena slot."""
        rows = self._cells[key]
        rows.remove(row)
        if not rows:
            del self._cells[key]
            self._sorted_keys = None

    def attach_row(self, key: CellKey, row: int) -> None:
        rows = self._cells.get(key)
        if rows is None:
            self._cells[key] = [row]
            self._sorted_keys = None
        else:
            rows.append(row)

    def rebind_groups(self, removals, additions) -> None:
        """Bulk re-link of rows between cells without touching the arena.

        `removals` yields (key, rows) groups to unlink; `additions` yields
        (key, rows) groups to append, already in the desired cell and
        insertion order.  Equivalent to detach_row/attach_row per row.
        """
        for key, rows in removals:
            gone = set(int(r) for r in rows)
            kept = [r for r in self._cells[key] if r not in gone]
            if kept:
                self._cells[key] = kept
            else:
                del self._cells[key]
                self._sorted_keys = None
        for key, rows in additions:
            existing = self._cells.get(key)
            if existing is None:
                self._cells[key] = [int(r) for r in rows]
                self._sorted_keys = None
            else:
                existing.extend(int(r) for r in rows)

    def release_row(self, key: CellKey, row: int) -> None:
        self.detach_row(key, row)
        self.pool.release(row)

    def clear(self) -> None:
        for rows in self._cells.values():
            for row in rows:
                self.pool.release(row)
        self._cells.clear()
        self._sorted_keys = []

    # -- iteration -------------------------------------------------------------

    def particles_in_cell(self, key: CellKey) -> list[ParticleView]:
        return [ParticleView(self.pool, row) for row in self._cells.get(key, ())]

    def rows_in_cell(self, key: CellKey) -> list[int]:
        return list(self._cells.get(key, ()))

    def iter_cells(self):
        """Yield (key, row list) in ascending key order."""
        for key in self.keys():
            yield key, self._cells[key]

    def __iter__(self):
        for key in self.keys():
            for row in self._cells[key]:
                yield key, ParticleView(self.pool, row)

    def flat_rows(self):
        """(keys, rows, cell_index) with rows grouped by ascending cell key.

        `rows` indexes the arena; `cell_index[i]` points into `keys` for the
        cell of `rows[i]`.
        """
        keys = self.keys()
        rows = []
        cell_index = []
        for ci, key in enumerate(keys):
            cell_rows = self._cells[key]
            rows.extend(cell_rows)
            cell_index.extend([ci] * len(cell_rows))
        return keys, np.asarray(rows, dtype=np.int64), np.asarray(
            cell_index, dtype=np.int64
        )

    # -- convenience ------------------------------------------------------------

    def all_records(self) -> list[tuple[CellKey, ParticleData]]:
        return [(key, view.data()) for key, view in self]

    def id_position_map(self) -> dict[int, tuple[float, float]]:
        return {
            view.id: (float(view.location[0]), float(view.location[1]))
            for _, view in self
        }
