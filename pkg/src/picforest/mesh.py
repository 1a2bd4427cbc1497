"""Adaptive 2:1-balanced quadtree forest of bilinear quadrilateral cells.

The forest covers a rectangle or an annulus with an ``nx x ny`` coarse grid.
Every cell is the bilinear image of the unit reference square; children are
constructed by bilinear subdivision of their parent, so children exactly tile
the parent's image even for the annulus.

Vertex ordering follows the reference-square lexicographic convention:
``v0 -> (0,0), v1 -> (1,0), v2 -> (0,1), v3 -> (1,1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

DIM = 2

#: containment tolerance in reference coordinates
CONTAINMENT_EPS = 1e-10

#: Newton iteration cap for inverting the bilinear map
NEWTON_MAX_ITERS = 20


class MeshError(Exception):
    pass


@dataclass(frozen=True, order=True)
class CellKey:
    """(level, index) pair; lexicographic order is a strict total order."""

    level: int
    index: int

    def child(self, quadrant: int) -> "CellKey":
        return CellKey(self.level + 1, 4 * self.index + quadrant)

    def parent(self) -> "CellKey":
        if self.level == 0:
            raise MeshError("coarse cells have no parent")
        return CellKey(self.level - 1, self.index // 4)

    @property
    def quadrant(self) -> int:
        return self.index % 4


# ---------------------------------------------------------------------------
# geometry descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rectangle:
    x0: float
    x1: float
    y0: float
    y1: float

    def validate(self) -> None:
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise MeshError(f"invalid rectangle extents {self}")

    def coarse_vertex(self, nx: int, ny: int, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.x0 + (self.x1 - self.x0) * ix / nx,
            self.y0 + (self.y1 - self.y0) * iy / ny,
        )

    def coarse_index(self, nx: int, ny: int, pts: np.ndarray):
        """Vectorized coarse-cell guess (ix, iy, valid) for each point.

        The guess is exact for this geometry up to containment tolerance;
        callers verify with the bilinear inverse before trusting it.
        """
        pad = 1e-8
        fx = (pts[:, 0] - self.x0) / (self.x1 - self.x0) * nx
        fy = (pts[:, 1] - self.y0) / (self.y1 - self.y0) * ny
        valid = (fx >= -pad) & (fx <= nx + pad) & (fy >= -pad) & (fy <= ny + pad)
        ix = np.clip(np.floor(fx).astype(np.int64), 0, nx - 1)
        iy = np.clip(np.floor(fy).astype(np.int64), 0, ny - 1)
        return ix, iy, valid

    @property
    def angular_wrap(self) -> bool:
        return False

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass(frozen=True)
class Annulus:
    """Annulus mapped to an nx (angular) x ny (radial) coarse grid.

    Vertex radii are scaled by sqrt(alpha / (sin(alpha) cos(alpha))) with
    alpha = pi/nx, so the straight-edged coarse cells reproduce the annulus
    area exactly instead of inscribing a polygon that loses O(1/nx^2) area.
    """

    r_inner: float
    r_outer: float

    def validate(self) -> None:
        if not (0.0 < self.r_inner < self.r_outer):
            raise MeshError(f"invalid annulus extents {self}")

    def coarse_vertex(self, nx: int, ny: int, ix: int, iy: int) -> tuple[float, float]:
        alpha = np.pi / nx
        scale = np.sqrt(alpha / (np.sin(alpha) * np.cos(alpha)))
        r = (self.r_inner + (self.r_outer - self.r_inner) * iy / ny) * scale
        theta = 2.0 * np.pi * ix / nx
        return (r * np.cos(theta), r * np.sin(theta))

    def coarse_index(self, nx: int, ny: int, pts: np.ndarray):
        """Vectorized coarse-cell guess (ix, iy, valid) for each point.

        Approximate near the straight cell edges (chord sag); callers must
        verify with the bilinear inverse and try adjacent coarse cells.
        """
        alpha = np.pi / nx
        scale = np.sqrt(alpha / (np.sin(alpha) * np.cos(alpha)))
        theta = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2.0 * np.pi)
        ix = np.clip(np.floor(theta / (2.0 * np.pi) * nx).astype(np.int64), 0, nx - 1)
        r = np.hypot(pts[:, 0], pts[:, 1]) / scale
        dr = (self.r_outer - self.r_inner) / ny
        fy = (r - self.r_inner) / dr
        valid = (fy >= -1.0) & (fy <= ny + 1.0)  # one-cell slop for chord sag
        iy = np.clip(np.floor(fy).astype(np.int64), 0, ny - 1)
        return ix, iy, valid

    @property
    def angular_wrap(self) -> bool:
        return True

    @property
    def area(self) -> float:
        return np.pi * (self.r_outer**2 - self.r_inner**2)


Geometry = Rectangle | Annulus


# ---------------------------------------------------------------------------
# bilinear mapping
# ---------------------------------------------------------------------------


def map_to_real(vertices: np.ndarray, ref_point) -> np.ndarray:
    """Bilinear map of a reference point to physical space."""
    xi, eta = ref_point
    v = vertices
    return (
        (1 - xi) * (1 - eta) * v[0]
        + xi * (1 - eta) * v[1]
        + (1 - xi) * eta * v[2]
        + xi * eta * v[3]
    )


def mapping_jacobian(vertices: np.ndarray, ref_point) -> np.ndarray:
    """2x2 Jacobian of the bilinear map at a reference point (columns d/dxi, d/deta)."""
    xi, eta = ref_point
    v = vertices
    g = v[3] - v[1] - v[2] + v[0]
    d_xi = v[1] - v[0] + eta * g
    d_eta = v[2] - v[0] + xi * g
    return np.column_stack([d_xi, d_eta])


def invert_bilinear_batch(vertices: np.ndarray, points: np.ndarray):
    """Newton inversion of the bilinear map for a batch of (cell, point) pairs.

    vertices: (n, 4, 2), points: (n, 2).  Returns (refs (n,2), converged (n,) bool).
    Affine cells converge in a single iteration.
    """
    v0 = vertices[:, 0]
    e1 = vertices[:, 1] - v0
    e2 = vertices[:, 2] - v0
    g = vertices[:, 3] - vertices[:, 1] - vertices[:, 2] + v0

    n = len(points)
    ref = np.full((n, 2), 0.5)
    diam = np.maximum(
        np.linalg.norm(vertices[:, 3] - vertices[:, 0], axis=1),
        np.linalg.norm(vertices[:, 2] - vertices[:, 1], axis=1),
    )
    tol = 1e-13 * np.maximum(diam, 1e-300)
    converged = np.zeros(n, dtype=bool)

    if np.all(np.abs(g) <= (1e-14 * diam)[:, None]):
        # affine cells (parallelograms): the map inverts in closed form
        d = points - v0
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        ok = det != 0.0
        det = np.where(ok, det, 1.0)
        ref[:, 0] = (e2[:, 1] * d[:, 0] - e2[:, 0] * d[:, 1]) / det
        ref[:, 1] = (-e1[:, 1] * d[:, 0] + e1[:, 0] * d[:, 1]) / det
        return ref, ok

    active = np.arange(n)
    for _ in range(NEWTON_MAX_ITERS):
        xi = ref[active, 0]
        eta = ref[active, 1]
        va, e1a, e2a, ga = v0[active], e1[active], e2[active], g[active]
        res = (
            va
            + xi[:, None] * e1a
            + eta[:, None] * e2a
            + (xi * eta)[:, None] * ga
            - points[active]
        )
        done = np.hypot(res[:, 0], res[:, 1]) <= tol[active]
        converged[active[done]] = True
        active = active[~done]
        if len(active) == 0:
            break
        xi, eta = ref[active, 0], ref[active, 1]
        res = res[~done]
        j11 = e1[active, 0] + eta * g[active, 0]
        j21 = e1[active, 1] + eta * g[active, 1]
        j12 = e2[active, 0] + xi * g[active, 0]
        j22 = e2[active, 1] + xi * g[active, 1]
        det = j11 * j22 - j12 * j21
        bad = det == 0.0
        det[bad] = 1.0  # flagged unconverged below
        dxi = (j22 * res[:, 0] - j12 * res[:, 1]) / det
        deta = (-j21 * res[:, 0] + j11 * res[:, 1]) / det
        dxi[bad] = 0.0
        deta[bad] = 0.0
        ref[active, 0] -= dxi
        ref[active, 1] -= deta

    return ref, converged


def contains_reference(ref: np.ndarray, eps: float = CONTAINMENT_EPS) -> np.ndarray:
    ref = np.asarray(ref)
    lo, hi = -eps, 1.0 + eps
    if ref.ndim == 1:
        return bool(np.all(ref >= lo) and np.all(ref <= hi))
    return np.all((ref >= lo) & (ref <= hi), axis=-1)


def quad_area(vertices: np.ndarray) -> float:
    """Area of the (straight-edged) bilinear cell via the shoelace formula."""
    v = vertices[[0, 1, 3, 2]]  # counterclockwise circuit
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _subdivide(vertices: np.ndarray) -> list[np.ndarray]:
    """Vertices of the four children (z-order) under bilinear subdivision."""
    corners = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.5], [0.5, 0.5]])
    children = []
    for off in corners:
        refs = off + 0.5 * np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        children.append(np.array([map_to_real(vertices, r) for r in refs]))
    return children


def _morton_code(ix: int, iy: int, bits: int = 21) -> int:
    code = 0
    for b in range(bits):
        code |= ((ix >> b) & 1) << (2 * b) | ((iy >> b) & 1) << (2 * b + 1)
    return code


# ---------------------------------------------------------------------------
# cells and forest
# ---------------------------------------------------------------------------


class Cell:
    """One quadtree cell; a leaf owns a portion of the domain."""

    __slots__ = (
        "key",
        "vertices",
        "parent",
        "children",
        "owner_rank",
        "is_ghost",
        "cix",
        "ciy",
        "lx",
        "ly",
        "_forest",
    )

    def __init__(self, key, vertices, cix, ciy, lx, ly, parent=None):
        self.key = key
        self.vertices = vertices
        self.parent = parent
        self.children = None
        self.owner_rank = 0
        self.is_ghost = False
        self.cix = cix
        self.ciy = ciy
        self.lx = lx  # within-coarse-cell position at 2^level granularity
        self.ly = ly
        self._forest = None

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    @property
    def center(self) -> np.ndarray:
        return map_to_real(self.vertices, (0.5, 0.5))

    @property
    def diameter(self) -> float:
        return max(
            float(np.linalg.norm(self.vertices[3] - self.vertices[0])),
            float(np.linalg.norm(self.vertices[2] - self.vertices[1])),
        )

    @property
    def area(self) -> float:
        return quad_area(self.vertices)

    def bounding_box(self) -> tuple[float, float, float, float]:
        v = self.vertices
        return (
            float(v[:, 0].min()),
            float(v[:, 0].max()),
            float(v[:, 1].min()),
            float(v[:, 1].max()),
        )

    def map_to_real(self, ref_point) -> np.ndarray:
        return map_to_real(self.vertices, ref_point)

    def map_to_reference(self, point, clip: bool = False):
        """Invert the bilinear map; returns the reference point or None.

        With clip=True, out-of-cell points return their (converged) reference
        coordinates clipped to [0, 1]^2 instead of None.
        """
        ref, ok = invert_bilinear_batch(
            self.vertices[None, :, :], np.asarray(point, dtype=float)[None, :]
        )
        if clip:
            return np.clip(ref[0], 0.0, 1.0)
        if not ok[0] or not contains_reference(ref[0]):
            return None
        return ref[0]

    def __repr__(self):
        return f"Cell({self.key.level},{self.key.index})"


class Forest:
    """Quadtree forest over a mapped coarse grid.

    Immutable between mutation events; ``refine``/``coarsen`` return a new
    Forest plus the old<->new leaf correspondence.
    """

    def __init__(self, geometry: Geometry, nx: int, ny: int, leaf_keys=None):
        if nx < 1 or ny < 1:
            raise MeshError("coarse grid must be at least 1x1")
        geometry.validate()
        self.geometry = geometry
        self.nx = nx
        self.ny = ny

        # coarse cells indexed by Morton rank of their (ix, iy) grid coordinates,
        # so ascending level-0 index equals space-filling-curve order
        order = sorted(
            ((ix, iy) for ix in range(nx) for iy in range(ny)),
            key=lambda c: _morton_code(*c),
        )
        self._coarse_coords = order
        self._coords_rank = np.empty((nx, ny), dtype=np.int64)
        for rank, (ix, iy) in enumerate(order):
            self._coords_rank[ix, iy] = rank
        self.cells: dict[CellKey, Cell] = {}
        roots = []
        for rank, (ix, iy) in enumerate(order):
            verts = np.array(
                [
                    geometry.coarse_vertex(nx, ny, ix, iy),
                    geometry.coarse_vertex(nx, ny, ix + 1, iy),
                    geometry.coarse_vertex(nx, ny, ix, iy + 1),
                    geometry.coarse_vertex(nx, ny, ix + 1, iy + 1),
                ],
                dtype=float,
            )
            cell = Cell(CellKey(0, rank), verts, ix, iy, 0, 0)
            self.cells[cell.key] = cell
            roots.append(cell)
        self._roots = roots

        if leaf_keys is not None:
            target = set(leaf_keys)
            for root in roots:
                self._grow(root, target)

        self._rebuild_leaf_tables()

    # -- construction helpers ------------------------------------------------

    def _grow(self, cell: Cell, target: set[CellKey]) -> None:
        if cell.key in target:
            return
        self._split(cell)
        for child in cell.children:
            self._grow(child, target)

    def _split(self, cell: Cell) -> None:
        child_verts = _subdivide(cell.vertices)
        quadrant_offsets = [(0, 0), (1, 0), (0, 1), (1, 1)]
        cell.children = []
        for q, verts in enumerate(child_verts):
            dx, dy = quadrant_offsets[q]
            child = Cell(
                cell.key.child(q),
                verts,
                cell.cix,
                cell.ciy,
                2 * cell.lx + dx,
                2 * cell.ly + dy,
                parent=cell,
            )
            self.cells[child.key] = child
            cell.children.append(child)

    def _rebuild_leaf_tables(self) -> None:
        leaves: list[Cell] = []

        def collect(cell):
            if cell.is_leaf:
                leaves.append(cell)
            else:
                for child in cell.children:
                    collect(child)

        for root in self._roots:
            collect(root)

        self.leaves = leaves
        self.leaf_pos = {c.key: i for i, c in enumerate(leaves)}
        self.leaf_verts = np.array([c.vertices for c in leaves])
        self.leaf_levels = np.array([c.key.level for c in leaves], dtype=np.int32)
        self.leaf_diams = np.array([c.diameter for c in leaves])
        self.max_level = int(self.leaf_levels.max()) if leaves else 0
        # bounding boxes (x0, x1, y0, y1) for vectorized point-location filters
        if leaves:
            xs = self.leaf_verts[:, :, 0]
            ys = self.leaf_verts[:, :, 1]
            self._leaf_boxes = np.column_stack(
                [xs.min(axis=1), xs.max(axis=1), ys.min(axis=1), ys.max(axis=1)]
            )
            rxs = np.array([r.vertices[:, 0] for r in self._roots])
            rys = np.array([r.vertices[:, 1] for r in self._roots])
            self._root_boxes = np.column_stack(
                [rxs.min(axis=1), rxs.max(axis=1), rys.min(axis=1), rys.max(axis=1)]
            )
        else:
            self._leaf_boxes = np.zeros((0, 4))
            self._root_boxes = np.zeros((0, 4))
        for cell in leaves:
            cell._forest = self
        self._build_neighbors()

    def _lattice_rect(self, cell: Cell) -> tuple[int, int, int, int]:
        """Closed integer extent [gx, gx+s] x [gy, gy+s] on the global lattice
        at the finest current level."""
        shift = self.max_level - cell.key.level
        s = 1 << shift
        gx = ((cell.cix << cell.key.level) + cell.lx) << shift
        gy = ((cell.ciy << cell.key.level) + cell.ly) << shift
        return gx, gy, s, s

    def _build_neighbors(self) -> None:
        # With 2:1 balance any two touching leaves share a lattice point that is
        # a corner of both, so a corner registry finds every vertex neighbor.
        corner_map: dict[tuple[int, int], list[int]] = {}
        rects = []
        for pos, cell in enumerate(self.leaves):
            gx, gy, sx, sy = self._lattice_rect(cell)
            rects.append((gx, gy, sx, sy))
            for cx, cy in ((gx, gy), (gx + sx, gy), (gx, gy + sy), (gx + sx, gy + sy)):
                corner_map.setdefault((cx, cy), []).append(pos)
        self._lattice_rects = rects

        neighbors: list[list[int]] = []
        for pos, cell in enumerate(self.leaves):
            gx, gy, sx, sy = rects[pos]
            cand: set[int] = set()
            for cx, cy in ((gx, gy), (gx + sx, gy), (gx, gy + sy), (gx + sx, gy + sy)):
                cand.update(corner_map.get((cx, cy), ()))
            cand.discard(pos)
            touching = []
            for other in cand:
                ox, oy, osx, osy = rects[other]
                if gx <= ox + osx and ox <= gx + sx and gy <= oy + osy and oy <= gy + sy:
                    touching.append(other)
            neighbors.append(sorted(touching, key=lambda p: self.leaves[p].key))
        self._neighbor_pos = neighbors
        self._build_neighbor_tables(neighbors, rects)

    def _build_neighbor_tables(self, neighbors, rects) -> None:
        """Padded arrays driving the vectorized particle re-sort.

        nb_pad[i, m] is the m-th vertex neighbor of leaf i (-1 padding);
        nb_at_vertex[i, m, k] says whether that neighbor's closed lattice
        rectangle contains leaf i's k-th vertex; key_rank ranks leaves by
        ascending CellKey for deterministic tie-breaking.
        """
        n = len(self.leaves)
        self.leaf_centers = (
            self.leaf_verts.mean(axis=1) if n else np.zeros((0, 2))
        )
        order = sorted(range(n), key=lambda p: self.leaves[p].key)
        self.key_rank = np.empty(n, dtype=np.int64)
        self.key_rank[order] = np.arange(n)
        m_max = max((len(nb) for nb in neighbors), default=0)
        self.nb_pad = np.full((n, max(m_max, 1)), -1, dtype=np.int64)
        self.nb_at_vertex = np.zeros((n, max(m_max, 1), 4), dtype=bool)
        for pos, nbs in enumerate(neighbors):
            gx, gy, sx, sy = rects[pos]
            corners = ((gx, gy), (gx + sx, gy), (gx, gy + sy), (gx + sx, gy + sy))
            for m, other in enumerate(nbs):
                self.nb_pad[pos, m] = other
                ox, oy, osx, osy = rects[other]
                for k, (vx, vy) in enumerate(corners):
                    self.nb_at_vertex[pos, m, k] = (
                        ox <= vx <= ox + osx and oy <= vy <= oy + osy
                    )

    # -- queries ---------------------------------------------------------------

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    def leaf(self, key: CellKey) -> Cell:
        return self.leaves[self.leaf_pos[key]]

    def vertex_neighbors(self, cell: Cell) -> list[Cell]:
        """All leaves sharing at least a vertex with the given leaf."""
        return [self.leaves[p] for p in self._neighbor_pos[self.leaf_pos[cell.key]]]

    def edge_neighbors(self, cell: Cell) -> list[Cell]:
        """Leaves sharing a positive-length edge segment with the given leaf."""
        pos = self.leaf_pos[cell.key]
        gx, gy, sx, sy = self._lattice_rects[pos]
        out = []
        for other in self._neighbor_pos[pos]:
            ox, oy, osx, osy = self._lattice_rects[other]
            overlap_x = min(gx + sx, ox + osx) - max(gx, ox)
            overlap_y = min(gy + sy, oy + osy) - max(gy, oy)
            if (overlap_x > 0) != (overlap_y > 0):  # segment in exactly one axis
                out.append(self.leaves[other])
        return out

    def locate(self, point) -> Cell | None:
        """Leaf containing the point, or None if outside the domain.

        Points on shared faces resolve to the lower-CellKey leaf.
        """
        point = np.asarray(point, dtype=float)
        hit = self._locate_descent(point)
        if hit is None:
            return None
        cell, ref = hit
        on_face = np.any(np.abs(ref) <= 2 * CONTAINMENT_EPS) or np.any(
            np.abs(ref - 1.0) <= 2 * CONTAINMENT_EPS
        )
        if not on_face:
            return cell
        # any other leaf containing a shared-face point is a vertex neighbor
        pos = self.leaf_pos[cell.key]
        candidates = [cell] + [self.leaves[p] for p in self.nb_pad[pos] if p >= 0]
        containing = [c for c in candidates if c.map_to_reference(point) is not None]
        return min(containing, key=lambda c: c.key) if containing else cell

    _RING = ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1),
             (1, 1), (1, -1), (-1, 1), (-1, -1))

    def _locate_descent(self, point):
        # direct coarse-grid guess first; the inverse index is exact up to
        # containment tolerance (rectangle) or one cell of chord sag (annulus),
        # so the guessed root and its ring of grid neighbors cover every hit
        ix, iy, valid = self.geometry.coarse_index(
            self.nx, self.ny, np.asarray(point, dtype=float).reshape(1, 2)
        )
        if valid[0]:
            wrap = self.geometry.angular_wrap
            for dx, dy in self._RING:
                jx, jy = int(ix[0]) + dx, int(iy[0]) + dy
                if wrap:
                    jx %= self.nx
                if not (0 <= jx < self.nx and 0 <= jy < self.ny):
                    continue
                hit = self._descend(self._roots[self._coords_rank[jx, jy]], point)
                if hit is not None:
                    return hit
        # fall back to a bounding-box scan over roots (points just outside the
        # padded index validity but within containment tolerance)
        pads = 1e-12 + 4 * CONTAINMENT_EPS * self.leaf_diams.max()
        b = self._root_boxes
        cand = np.flatnonzero(
            (b[:, 0] - pads <= point[0])
            & (point[0] <= b[:, 1] + pads)
            & (b[:, 2] - pads <= point[1])
            & (point[1] <= b[:, 3] + pads)
        )
        for ri in cand:
            hit = self._descend(self._roots[ri], point)
            if hit is not None:
                return hit
        return None

    def locate_batch(self, points):
        """Vectorized locate: (leaf positions, reference coords); -1 outside.

        Fast path for unrefined forests: one batched bilinear inversion
        against the directly indexed coarse cells.  Face-tie points and
        misses reroute through ``locate`` for the documented tie-break.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        n = len(pts)
        pos = np.full(n, -1, dtype=np.int64)
        refs = np.full((n, 2), np.nan)
        pending = np.arange(n)
        if n and self.max_level == 0:
            ix, iy, valid = self.geometry.coarse_index(self.nx, self.ny, pts)
            sel = np.flatnonzero(valid)
            if sel.size:
                # unrefined: leaf position == root Morton rank
                guess = self._coords_rank[ix[sel], iy[sel]]
                r, ok = invert_bilinear_batch(self.leaf_verts[guess], pts[sel])
                inside = ok & contains_reference(r)
                on_face = inside & (
                    np.any(np.abs(r) <= 2 * CONTAINMENT_EPS, axis=1)
                    | np.any(np.abs(r - 1.0) <= 2 * CONTAINMENT_EPS, axis=1)
                )
                take = inside & ~on_face
                hits = sel[take]
                pos[hits] = guess[take]
                refs[hits] = r[take]
            done = np.zeros(n, dtype=bool)
            done[pos >= 0] = True
            if self.geometry.angular_wrap:
                pending = np.flatnonzero(~done)
            else:
                # rectangle index is exact: invalid points are outside
                done |= ~valid
                pending = np.flatnonzero(~done)
        for i in pending:
            cell = self.locate(pts[i])
            if cell is not None:
                pos[i] = self.leaf_pos[cell.key]
                refs[i] = cell.map_to_reference(pts[i])
        return pos, refs

    def _descend(self, cell: Cell, point):
        ref = cell.map_to_reference(point)
        if ref is None:
            return None
        if cell.is_leaf:
            return cell, ref
        for child in cell.children:  # ascending key order
            hit = self._descend(child, point)
            if hit is not None:
                return hit
        return None

    def total_leaf_area(self) -> float:
        return float(sum(c.area for c in self.leaves))

    # -- mutation --------------------------------------------------------------

    def leaf_keys(self) -> list[CellKey]:
        return [c.key for c in self.leaves]

    def refine(self, keys: Iterable[CellKey]):
        """Refine the given leaves (plus 2:1 balance propagation).

        Returns (new_forest, correspondence) where correspondence maps each old
        leaf key to [itself] or its four children.
        """
        to_refine = set(keys)
        for key in to_refine:
            if key not in self.leaf_pos:
                raise MeshError(f"cannot refine non-leaf {key}")
        leaf_set = set(self.leaf_keys())
        balanced = _balance_refinement(self, leaf_set, to_refine)
        new_leaves = (leaf_set - balanced) | {
            k.child(q) for k in balanced for q in range(4)
        }
        new_forest = Forest(self.geometry, self.nx, self.ny, new_leaves)
        correspondence = {
            k: ([k.child(q) for q in range(4)] if k in balanced else [k])
            for k in leaf_set
        }
        return new_forest, correspondence

    def coarsen(self, keys: Iterable[CellKey]):
        """Coarsen complete sibling groups into their parents.

        Groups whose removal would break 2:1 balance are skipped.  Returns
        (new_forest, correspondence) mapping old leaf keys to [parent] or [itself].
        """
        requested = set(keys)
        for key in requested:
            if key not in self.leaf_pos:
                raise MeshError(f"cannot coarsen non-leaf {key}")
        parents: dict[CellKey, set[CellKey]] = {}
        for key in requested:
            if key.level == 0:
                raise MeshError(f"cannot coarsen coarse cell {key}")
            parents.setdefault(key.parent(), set()).add(key)
        for parent, group in parents.items():
            siblings = {parent.child(q) for q in range(4)}
            if group != siblings:
                raise MeshError(f"partial sibling set for parent {parent}")
            if not siblings <= set(self.leaf_pos):
                raise MeshError(f"sibling group of {parent} is not all leaves")

        leaf_set = set(self.leaf_keys())
        accepted = {}
        for parent, group in sorted(parents.items(), key=lambda kv: kv[0]):
            trial = (leaf_set - group) | {parent}
            if _is_balanced_leaf_set(self, trial):
                leaf_set = trial
                accepted[parent] = group

        new_forest = Forest(self.geometry, self.nx, self.ny, leaf_set)
        correspondence = {}
        for parent, group in accepted.items():
            for key in group:
                correspondence[key] = [parent]
        for key in self.leaf_keys():
            correspondence.setdefault(key, [key])
        return new_forest, correspondence

    # -- serialization -----------------------------------------------------------

    def dump(self, path) -> None:
        """Text dump, one leaf per line: level index v0x v0y ... v3y owner."""
        geo = self.geometry
        if isinstance(geo, Rectangle):
            desc = f"rectangle {geo.x0} {geo.x1} {geo.y0} {geo.y1}"
        else:
            desc = f"annulus {geo.r_inner} {geo.r_outer}"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# forest {self.nx} {self.ny} {desc}\n")
            for cell in self.leaves:
                coords = " ".join(repr(float(x)) for x in cell.vertices.ravel())
                fh.write(
                    f"{cell.key.level} {cell.key.index} {coords} {cell.owner_rank}\n"
                )

    @classmethod
    def restore(cls, path) -> "Forest":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) < 5 or header[1] != "forest":
                raise MeshError("missing forest header line")
            nx, ny = int(header[2]), int(header[3])
            if header[4] == "rectangle":
                geometry = Rectangle(*(float(t) for t in header[5:9]))
            elif header[4] == "annulus":
                geometry = Annulus(float(header[5]), float(header[6]))
            else:
                raise MeshError(f"unknown geometry {header[4]!r}")
            keys = []
            owners = []
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                keys.append(CellKey(int(parts[0]), int(parts[1])))
                owners.append(int(parts[10]))
        forest = cls(geometry, nx, ny, keys)
        for key, owner in zip(keys, owners):
            forest.leaf(key).owner_rank = owner
        return forest


def _edge_adjacent_levels_ok(la: int, lb: int) -> bool:
    return abs(la - lb) <= 1


def _edge_pairs(forest: Forest, leaf_set: set[CellKey]):
    """Edge-adjacent key pairs of a hypothetical leaf set, via lattice rects."""
    max_level = max(k.level for k in leaf_set)

    def rect(key: CellKey):
        # reconstruct (cix, ciy, lx, ly) from the key's base-4 path
        path = []
        k = key
        while k.level > 0:
            path.append(k.quadrant)
            k = k.parent()
        cix, ciy = forest._coarse_coords[k.index]
        lx = ly = 0
        for q in reversed(path):
            lx = 2 * lx + (q & 1)
            ly = 2 * ly + (q >> 1)
        shift = max_level - key.level
        s = 1 << shift
        return (
            ((cix << key.level) + lx) << shift,
            ((ciy << key.level) + ly) << shift,
            s,
        )

    rects = {k: rect(k) for k in leaf_set}
    corner_map: dict[tuple[int, int], list[CellKey]] = {}
    for k, (gx, gy, s) in rects.items():
        for cx, cy in ((gx, gy), (gx + s, gy), (gx, gy + s), (gx + s, gy + s)):
            corner_map.setdefault((cx, cy), []).append(k)
    seen = set()
    for k, (gx, gy, s) in rects.items():
        cand = set()
        for cx, cy in ((gx, gy), (gx + s, gy), (gx, gy + s), (gx + s, gy + s)):
            cand.update(corner_map.get((cx, cy), ()))
        cand.discard(k)
        for other in cand:
            pair = (k, other) if k < other else (other, k)
            if pair in seen:
                continue
            seen.add(pair)
            ox, oy, os = rects[other]
            overlap_x = min(gx + s, ox + os) - max(gx, ox)
            overlap_y = min(gy + s, oy + os) - max(gy, oy)
            if (overlap_x > 0) != (overlap_y > 0):
                yield pair


def _is_balanced_leaf_set(forest: Forest, leaf_set: set[CellKey]) -> bool:
    return all(
        _edge_adjacent_levels_ok(a.level, b.level)
        for a, b in _edge_pairs(forest, leaf_set)
    )


def _balance_refinement(
    forest: Forest, leaf_set: set[CellKey], to_refine: set[CellKey]
) -> set[CellKey]:
    """Close the refinement set so the refined mesh is 2:1 edge-balanced."""
    refine = set(to_refine)
    while True:
        trial = (leaf_set - refine) | {k.child(q) for k in refine for q in range(4)}
        added = False
        for a, b in _edge_pairs(forest, trial):
            if _edge_adjacent_levels_ok(a.level, b.level):
                continue
            coarse = a if a.level < b.level else b
            if coarse in refine:
                continue
            # on a balanced input the too-coarse side is always an original leaf
            refine.add(coarse)
            added = True
        if not added:
            return refine


def build_coarse(geometry: Geometry, nx: int, ny: int) -> Forest:
    """Forest with nx*ny level-0 leaves over the given geometry."""
    return Forest(geometry, nx, ny)
