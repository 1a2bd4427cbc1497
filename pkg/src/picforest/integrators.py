"""Explicit Runge-Kutta particle advection and convergence measurement.

Each scheme advances all particles one substage at a time; between substages
the caller re-sorts particles into cells (and across ranks), so scratch state
(x^n and the running k-combination) lives in a reserved tail segment of the
particle property slot and migrates with the particle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Forest
from .store import Store
from .velocity import VelocityField, _check_bracket

ROUND_OFF_FLOOR = 1e-13


class IntegratorError(Exception):
    pass


@dataclass(frozen=True)
class Scheme:
    name: str
    order: int
    n_stages: int
    scratch_slots: int  # reals reserved at the tail of the property slot


SCHEMES = {
    "euler": Scheme("euler", 1, 1, 0),
    "rk2": Scheme("rk2", 2, 2, 2),  # x^n
    "rk4": Scheme("rk4", 4, 4, 4),  # x^n and running sum of weighted dt*k_i
}


def scheme(name: str) -> Scheme:
    try:
        return SCHEMES[name]
    except KeyError:
        raise IntegratorError(
            f"unknown scheme {name!r}; choose from {sorted(SCHEMES)}"
        ) from None


def compute_cfl_dt(field: VelocityField, forest: Forest, cfl: float, t: float = 0.0) -> float:
    """Time step cfl * min over leaves of (diameter / max vertex speed)."""
    if cfl <= 0:
        raise IntegratorError("cfl must be positive")
    speeds = field.vertex_speeds(forest, t).max(axis=1)
    active = speeds > 0
    if not np.any(active):
        raise IntegratorError("velocity field vanishes at every mesh vertex")
    return cfl * float(np.min(forest.leaf_diams[active] / speeds[active]))


def _stage_velocities(store: Store, forest: Forest, field: VelocityField, t: float):
    """(rows, velocities) for every stored particle at time t."""
    keys, rows, cell_index = store.flat_rows()
    if len(rows) == 0:
        return rows, np.zeros((0, 2))
    leaf_of_key = np.fromiter(
        (forest.leaf_pos[k] for k in keys), dtype=np.int64, count=len(keys)
    )
    leaf_idx = leaf_of_key[cell_index]
    pool = store.pool
    u = field.evaluate_batch(forest, leaf_idx, pool.ref[rows], pool.loc[rows], t)
    return rows, u


def advance_substage(
    sch: Scheme,
    stage: int,
    store: Store,
    forest: Forest,
    field: VelocityField,
    t: float,
    dt: float,
    scratch_offset: int,
) -> None:
    """Run one substage of the scheme, updating particle positions in place.

    `t` is the step start time; stage evaluation times follow the Butcher
    tableau.  The caller must re-sort particles into cells before the next
    substage so reference locations stay synchronized.
    """
    if not 0 <= stage < sch.n_stages:
        raise IntegratorError(f"{sch.name} has no stage {stage}")
    c = {"euler": (0.0,), "rk2": (0.0, 0.5), "rk4": (0.0, 0.5, 0.5, 1.0)}[sch.name]
    t_stage = t + c[stage] * dt
    _check_bracket(field, t_stage)
    rows, u = _stage_velocities(store, forest, field, t_stage)
    if len(rows) == 0:
        return
    pool = store.pool
    loc = pool.loc
    k = dt * u

    if sch.name == "euler":
        loc[rows] += k
        return

    off = scratch_offset
    if sch.name == "rk2":
        if stage == 0:
            pool.props[rows, off : off + 2] = loc[rows]  # save x^n
            loc[rows] += 0.5 * k
        else:
            loc[rows] = pool.props[rows, off : off + 2] + k
        return

    # rk4: scratch = [x^n, running sum of weighted dt*k_i]
    xn = pool.props[rows, off : off + 2]
    acc = pool.props[rows, off + 2 : off + 4]
    if stage == 0:
        pool.props[rows, off : off + 2] = loc[rows]
        pool.props[rows, off + 2 : off + 4] = k / 6.0
        loc[rows] = loc[rows] + 0.5 * k
    elif stage == 1:
        pool.props[rows, off + 2 : off + 4] = acc + k / 3.0
        loc[rows] = xn + 0.5 * k
    elif stage == 2:
        pool.props[rows, off + 2 : off + 4] = acc + k / 3.0
        loc[rows] = xn + k
    else:
        loc[rows] = xn + acc + k / 6.0


def advance_step(
    sch: Scheme,
    store: Store,
    forest: Forest,
    field: VelocityField,
    t: float,
    dt: float,
    scratch_offset: int,
    after_substage=None,
):
    """One full time step; `after_substage()` is the transport hook run after
    every substage (including the last)."""
    for stage in range(sch.n_stages):
        advance_substage(sch, stage, store, forest, field, t, dt, scratch_offset)
        if after_substage is not None:
            after_substage()


# ---------------------------------------------------------------------------
# convergence measurement
# ---------------------------------------------------------------------------


def observed_order(dts, errors) -> float:
    """Least-squares slope of log error vs log dt, excluding the round-off
    floor."""
    dts = np.asarray(dts, dtype=float)
    errors = np.asarray(errors, dtype=float)
    keep = errors > ROUND_OFF_FLOOR
    if keep.sum() < 2:
        raise IntegratorError(
            "all errors at or below round-off; the study is degenerate (exact)"
        )
    slope, _ = np.polyfit(np.log(dts[keep]), np.log(errors[keep]), 1)
    return float(slope)


def convergence_study(
    forest: Forest,
    field: VelocityField,
    scheme_name: str,
    dts,
    t_final: float,
    seed_points,
    exact_field: VelocityField | None = None,
):
    """Advect seed particles to t_final at each dt and fit the error order.

    The error at each dt is the max over seeds of |x(T) - x_h(T)| against the
    exact trajectories of `exact_field` (default: `field` itself, which must
    provide trajectory()).  Returns (errors, q) with q = fitted order, or
    (errors, None) when every error sits on the round-off floor.
    """
    from .transport import sort_into_cells

    sch = scheme(scheme_name)
    reference = exact_field if exact_field is not None else field
    seed_points = np.asarray(seed_points, dtype=float)
    errors = []
    for dt in dts:
        store = Store(stride=sch.scratch_slots)
        for i, x0 in enumerate(seed_points):
            cell = forest.locate(x0)
            if cell is None:
                raise IntegratorError(f"seed point {x0} lies outside the mesh")
            from .store import ParticleData

            store.insert(
                cell.key, ParticleData(i, x0.copy(), cell.map_to_reference(x0), None)
            )
        n_steps = int(round(t_final / dt))
        if abs(n_steps * dt - t_final) > 1e-9 * t_final:
            raise IntegratorError(f"dt={dt} does not divide t_final={t_final}")
        t = 0.0
        for _ in range(n_steps):
            advance_step(
                sch, store, forest, field, t, dt, 0,
                after_substage=lambda: sort_into_cells(store, forest),
            )
            t += dt
        if len(store) != len(seed_points):
            raise IntegratorError("seed particle left the mesh during the study")
        err = 0.0
        for _, view in store:
            exact = reference.trajectory(seed_points[int(view.id)], t_final)
            err = max(err, float(np.linalg.norm(view.location - exact)))
        errors.append(err)
    errors_arr = np.asarray(errors)
    if np.all(errors_arr <= ROUND_OFF_FLOOR):
        return errors_arr, None
    return errors_arr, observed_order(dts, errors_arr)
