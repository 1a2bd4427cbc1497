"""Per-particle properties: registry, update ODEs, and mesh interpolation.

A PropertyManager owns an ordered list of plugins, assigns each a contiguous
component range inside the particle property slot, and reserves a tail
segment for integrator scratch so the whole slot serializes with the
particle.  Property ODEs (damage, deformation gradient) take one forward
Euler step per time step using end-of-step positions and velocities.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .mesh import CellKey, Forest
from .store import Store
from .velocity import VelocityField


class PropertyError(Exception):
    pass


class EmptyCellError(PropertyError):
    """Interpolation found cells with no contributing particles."""

    def __init__(self, keys):
        self.keys = list(keys)
        super().__init__(
            f"no contributing particles (even after the one-ghost-layer "
            f"extension) in cells: {self.keys}"
        )


# ---------------------------------------------------------------------------
# plugins
# ---------------------------------------------------------------------------


class PropertyPlugin:
    """One named property: fixed component count, init rule, optional ODE."""

    name: str
    n_components: int
    init_mode = "function"  # or "interpolate"

    def initial_values(self, x0: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def update(self, values, locs, grads, dt: float) -> None:
        """Forward-Euler update in place; grads are end-of-step velocity
        gradients, shape (n, 2, 2).  Default: property is constant."""


@dataclass
class InitialPosition(PropertyPlugin):
    name: str = "initial_position"
    n_components: int = 2

    def initial_values(self, x0):
        return np.asarray(x0, dtype=float)


@dataclass
class Composition(PropertyPlugin):
    """Scalar composition C set once from the initial position."""

    function: callable = lambda x0: 1.0 if x0[1] <= 0.4 else 0.0
    init_mode: str = "function"
    name: str = "composition"
    n_components: int = 1

    def initial_values(self, x0):
        return np.array([float(self.function(x0))])


@dataclass
class Damage(PropertyPlugin):
    """Scalar damage with d' = alpha * ||strain rate||_F - beta * d, d >= 0."""

    alpha: float = 1.0
    beta: float = 0.0
    d0: float = 0.0
    name: str = "damage"
    n_components: int = 1

    def initial_values(self, x0):
        return np.array([self.d0])

    def update(self, values, locs, grads, dt):
        strain = 0.5 * (grads + np.transpose(grads, (0, 2, 1)))
        rate = np.sqrt((strain**2).sum(axis=(1, 2)))
        values[:, 0] += dt * (self.alpha * rate - self.beta * values[:, 0])
        np.maximum(values[:, 0], 0.0, out=values[:, 0])


@dataclass
class DeformationGradient(PropertyPlugin):
    """2x2 deformation tensor with F' = grad(u) F, F(0) = I; row-major."""

    name: str = "deformation_gradient"
    n_components: int = 4

    def initial_values(self, x0):
        return np.array([1.0, 0.0, 0.0, 1.0])

    def update(self, values, locs, grads, dt):
        F = values.reshape(-1, 2, 2)
        F += dt * np.einsum("nij,njk->nik", grads, F)


@dataclass
class SampledSpeed(PropertyPlugin):
    """Velocity magnitude snapshot, refreshed only at output time."""

    name: str = "speed"
    n_components: int = 1

    def initial_values(self, x0):
        return np.array([0.0])


PLUGIN_FACTORIES = {
    "initial_position": InitialPosition,
    "composition": Composition,
    "damage": Damage,
    "deformation_gradient": DeformationGradient,
    "speed": SampledSpeed,
}


# ---------------------------------------------------------------------------
# manager
# ---------------------------------------------------------------------------


class PropertyManager:
    """Assigns property offsets and runs initialization/updates.

    The total particle slot is `stride` property components plus
    `scratch_slots` integrator scratch reals at the tail; the component
    count is fixed for the whole run.
    """

    def __init__(self, plugins, scratch_slots: int = 0):
        self.plugins = list(plugins)
        self.offsets: dict[str, tuple[int, int]] = {}
        off = 0
        for plugin in self.plugins:
            if plugin.name in self.offsets:
                raise PropertyError(f"duplicate property name {plugin.name!r}")
            self.offsets[plugin.name] = (off, plugin.n_components)
            off += plugin.n_components
        self.stride = off
        self.scratch_slots = scratch_slots
        self.total_stride = off + scratch_slots
        self.scratch_offset = off

    def slice_of(self, name: str) -> slice:
        try:
            off, n = self.offsets[name]
        except KeyError:
            raise PropertyError(f"unknown property {name!r}") from None
        return slice(off, off + n)

    def initialize_particle(self, store: Store, key: CellKey, row: int) -> None:
        """Write every plugin's initial segment for one (freshly inserted)
        particle; interpolate-mode plugins average over the other particles
        already in the cell, falling back to function init when alone."""
        pool = store.pool
        x0 = pool.loc[row]
        for plugin in self.plugins:
            sl = self.slice_of(plugin.name)
            if plugin.init_mode == "interpolate":
                others = [r for r in store.rows_in_cell(key) if r != row]
                if others:
                    pool.props[row, sl] = pool.props[others, sl].mean(axis=0)
                    continue
            pool.props[row, sl] = plugin.initial_values(x0)

    def initialize_all(self, store: Store) -> None:
        for key, rows in store.iter_cells():
            for row in rows:
                pool = store.pool
                x0 = pool.loc[row]
                for plugin in self.plugins:
                    pool.props[row, self.slice_of(plugin.name)] = (
                        plugin.initial_values(x0)
                    )

    def update_all(
        self, store: Store, forest: Forest, field: VelocityField, t: float, dt: float
    ) -> None:
        """One forward-Euler step of every property ODE at end-of-step state."""
        if not any(type(p).update is not PropertyPlugin.update for p in self.plugins):
            return
        keys, rows, cell_index = store.flat_rows()
        if len(rows) == 0:
            return
        pool = store.pool
        leaf_of_key = np.fromiter(
            (forest.leaf_pos[k] for k in keys), dtype=np.int64, count=len(keys)
        )
        leaf_idx = leaf_of_key[cell_index]
        grads = field.gradient_batch(forest, leaf_idx, pool.ref[rows], pool.loc[rows], t)
        for plugin in self.plugins:
            if type(plugin).update is PropertyPlugin.update:
                continue
            sl = self.slice_of(plugin.name)
            values = pool.props[rows, sl]
            plugin.update(values, pool.loc[rows], grads, dt)
            pool.props[rows, sl] = values

    def sample_outputs(
        self, store: Store, forest: Forest, field: VelocityField, t: float
    ) -> None:
        """Refresh output-time sampled properties (velocity magnitude)."""
        names = [p.name for p in self.plugins if isinstance(p, SampledSpeed)]
        if not names:
            return
        keys, rows, cell_index = store.flat_rows()
        if len(rows) == 0:
            return
        pool = store.pool
        leaf_of_key = np.fromiter(
            (forest.leaf_pos[k] for k in keys), dtype=np.int64, count=len(keys)
        )
        u = field.evaluate_batch(
            forest, leaf_of_key[cell_index], pool.ref[rows], pool.loc[rows], t
        )
        speed = np.linalg.norm(u, axis=1)
        for name in names:
            pool.props[rows, self.offsets[name][0]] = speed


def build_manager(plugin_names, scratch_slots: int = 0, **kwargs) -> PropertyManager:
    """Manager from plugin names; kwargs forward per-plugin parameters
    (e.g. damage_alpha=1.0)."""
    plugins = []
    for name in plugin_names:
        if name not in PLUGIN_FACTORIES:
            raise PropertyError(
                f"unknown property plugin {name!r}; "
                f"choose from {sorted(PLUGIN_FACTORIES)}"
            )
        params = {
            k[len(name) + 1 :]: v
            for k, v in kwargs.items()
            if k.startswith(name + "_")
        }
        plugins.append(PLUGIN_FACTORIES[name](**params))
    return PropertyManager(plugins, scratch_slots)


# ---------------------------------------------------------------------------
# particle-to-mesh interpolation
# ---------------------------------------------------------------------------

INTERPOLATION_SCHEMES = (
    "nearest_neighbor",
    "arithmetic_mean",
    "geometric_mean",
    "harmonic_mean",
    "distance_weighted",
    "shape_function_weighted",
    "least_squares_linear",
)

_GAUSS = 0.5 - 0.5 / np.sqrt(3.0)
QUADRATURE_REFS = np.array(
    [[_GAUSS, _GAUSS], [1 - _GAUSS, _GAUSS], [_GAUSS, 1 - _GAUSS],
     [1 - _GAUSS, 1 - _GAUSS]]
)


def _cell_rows(store: Store, ghost_store: Store | None, key: CellKey):
    """(pool, rows) pairs contributing from one cell, owned first."""
    out = [(store.pool, r) for r in store.rows_in_cell(key)]
    if ghost_store is not None:
        out += [(ghost_store.pool, r) for r in ghost_store.rows_in_cell(key)]
    return out


def interpolate_to_mesh(
    store: Store,
    ghost_store: Store | None,
    forest: Forest,
    scheme: str,
    name: str,
    manager: PropertyManager,
    quadrature: bool = False,
) -> np.ndarray:
    """Per-cell property values at cell centers (or 2x2 quadrature points).

    Returns an array of shape (n_leaves, n_targets, n_components).  A cell
    without particles borrows from its vertex neighbors (one ghost layer);
    if that still yields nothing, all such cells are reported at once.
    """
    if scheme not in INTERPOLATION_SCHEMES:
        raise PropertyError(
            f"unknown interpolation scheme {scheme!r}; "
            f"choose from {INTERPOLATION_SCHEMES}"
        )
    sl = manager.slice_of(name)
    ncomp = sl.stop - sl.start
    n_targets = 4 if quadrature else 1
    out = np.full((forest.n_leaves, n_targets, ncomp), np.nan)
    empty = []

    for pos, cell in enumerate(forest.leaves):
        contributors = _cell_rows(store, ghost_store, cell.key)
        extended = False
        if not contributors:
            extended = True
            for nb in forest.vertex_neighbors(cell):
                contributors += _cell_rows(store, ghost_store, nb.key)
        if not contributors:
            empty.append(cell.key)
            continue

        locs = np.array([pool.loc[r] for pool, r in contributors])
        vals = np.array([pool.props[r, sl] for pool, r in contributors])
        if quadrature:
            targets_ref = QUADRATURE_REFS
        else:
            targets_ref = np.array([[0.5, 0.5]])
        targets = np.array([cell.map_to_real(rp) for rp in targets_ref])

        if scheme == "nearest_neighbor":
            for ti, tx in enumerate(targets):
                d2 = ((locs - tx) ** 2).sum(axis=1)
                out[pos, ti] = vals[int(np.argmin(d2))]
        elif scheme == "arithmetic_mean":
            out[pos, :] = vals.mean(axis=0)
        elif scheme == "geometric_mean":
            if np.any(vals <= 0):
                raise PropertyError(
                    f"geometric mean requires positive values (cell {cell.key})"
                )
            out[pos, :] = np.exp(np.log(vals).mean(axis=0))
        elif scheme == "harmonic_mean":
            if np.any(vals <= 0):
                raise PropertyError(
                    f"harmonic mean requires positive values (cell {cell.key})"
                )
            out[pos, :] = 1.0 / (1.0 / vals).mean(axis=0)
        elif scheme == "distance_weighted":
            # inverse distance over in-cell plus neighboring (incl. ghost)
            # particles within one cell diameter of the target
            if not extended:
                for nb in forest.vertex_neighbors(cell):
                    extra = _cell_rows(store, ghost_store, nb.key)
                    if extra:
                        locs = np.vstack(
                            [locs, [pool.loc[r] for pool, r in extra]]
                        )
                        vals = np.vstack(
                            [vals, [pool.props[r, sl] for pool, r in extra]]
                        )
            radius = cell.diameter
            for ti, tx in enumerate(targets):
                d = np.sqrt(((locs - tx) ** 2).sum(axis=1))
                keep = d <= radius
                if not np.any(keep):
                    keep = np.ones(len(d), dtype=bool)  # degenerate: use all
                w = 1.0 / np.maximum(d[keep], 1e-300)
                out[pos, ti] = (w[:, None] * vals[keep]).sum(axis=0) / w.sum()
        elif scheme == "shape_function_weighted":
            # bilinear hat centered at the target's reference point,
            # evaluated at each particle's reference location
            refs = np.array(
                [
                    cell.map_to_reference(x, clip=True)
                    for x in locs
                ]
            )
            for ti, rp in enumerate(targets_ref):
                w = np.prod(np.clip(1.0 - np.abs(refs - rp), 0.0, None), axis=1)
                if w.sum() <= 0:
                    w = np.ones(len(refs))
                out[pos, ti] = (w[:, None] * vals).sum(axis=0) / w.sum()
        else:  # least_squares_linear
            ones = np.ones((len(locs), 1))
            A = np.hstack([ones, locs])
            coef, *_ = np.linalg.lstsq(A, vals, rcond=None)
            fitted = np.hstack([np.ones((len(targets), 1)), targets]) @ coef
            lo = vals.min(axis=0)
            hi = vals.max(axis=0)
            out[pos, :] = np.clip(fitted, lo, hi)

    if empty:
        raise EmptyCellError(empty)
    return out


def entrainment(
    store: Store,
    ghost_store: Store | None,
    forest: Forest,
    manager: PropertyManager,
    name: str = "composition",
    threshold: float = 0.5,
) -> float:
    """e = (1/0.4) * integral of composition over the upper region y >= 0.5,
    using per-cell arithmetic means times cell area."""
    values = interpolate_to_mesh(store, ghost_store, forest, "arithmetic_mean",
                                 name, manager)
    total = 0.0
    for pos, cell in enumerate(forest.leaves):
        if cell.center[1] >= threshold:
            total += float(values[pos, 0, 0]) * cell.area
    return total / 0.4


def dump_interpolated(path, forest: Forest, values: np.ndarray) -> None:
    """CSV `level,index,cx,cy,value...` with cell-center values."""
    with open(path, "w", encoding="utf-8") as fh:
        ncomp = values.shape[-1]
        header = ",".join(f"value{i}" for i in range(ncomp))
        fh.write(f"level,index,cx,cy,{header}\n")
        for pos, cell in enumerate(forest.leaves):
            cx, cy = cell.center
            vals = ",".join(repr(float(v)) for v in values[pos, 0])
            fh.write(f"{cell.key.level},{cell.key.index},{cx!r},{cy!r},{vals}\n")
