"""Velocity fields: analytic formulas and discrete Q1 vertex snapshots.

All fields answer point evaluations through a (cell, reference point) pair and
provide the velocity gradient tensor (du_i/dx_j).  Discrete fields hold one
vector per mesh vertex and evaluate bilinearly inside each cell; two snapshots
can be combined with linear interpolation in time.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .mesh import Cell, Forest, mapping_jacobian


class FieldError(Exception):
    pass


class VelocityField:
    """Interface: evaluate / evaluate_gradient at a (cell, ref_point, t)."""

    def evaluate(self, cell: Cell, ref_point, t: float) -> np.ndarray:
        raise NotImplementedError

    def evaluate_gradient(self, cell: Cell, ref_point, t: float) -> np.ndarray:
        raise NotImplementedError

    def evaluate_batch(self, forest, leaf_idx, refs, locs, t: float) -> np.ndarray:
        """Vectorized evaluation for particles given their leaf index, reference
        location and physical location."""
        raise NotImplementedError

    def gradient_batch(self, forest, leaf_idx, refs, locs, t: float) -> np.ndarray:
        """(n, 2, 2) velocity gradients; the default loops evaluate_gradient."""
        out = np.empty((len(leaf_idx), 2, 2))
        for i, li in enumerate(leaf_idx):
            out[i] = self.evaluate_gradient(forest.leaves[li], refs[i], t)
        return out

    def vertex_speeds(self, forest: Forest, t: float) -> np.ndarray:
        """(n_leaves, 4) speed magnitudes at leaf vertices; used for CFL."""
        raise NotImplementedError

    def time_bracket(self) -> tuple[float, float] | None:
        """Valid [t_n, t_(n+1)] interval, or None if any t is admissible."""
        return None


def _check_bracket(field: VelocityField, t: float) -> None:
    bracket = field.time_bracket()
    if bracket is None:
        return
    t0, t1 = bracket
    slack = 1e-12 * max(1.0, abs(t0), abs(t1))
    if not (t0 - slack <= t <= t1 + slack):
        raise FieldError(f"t={t} outside snapshot bracket [{t0}, {t1}]")


# ---------------------------------------------------------------------------
# analytic fields
# ---------------------------------------------------------------------------


class AnalyticField(VelocityField):
    """Closed-form field; subclasses define velocity_at / gradient_at on (n,2)
    position arrays."""

    def velocity_at(self, x: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def gradient_at(self, x: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, cell, ref_point, t):
        x = cell.map_to_real(ref_point)
        return self.velocity_at(x[None, :], t)[0]

    def evaluate_gradient(self, cell, ref_point, t):
        x = cell.map_to_real(ref_point)
        return self.gradient_at(x[None, :], t)[0]

    def evaluate_batch(self, forest, leaf_idx, refs, locs, t):
        return self.velocity_at(locs, t)

    def gradient_batch(self, forest, leaf_idx, refs, locs, t):
        return self.gradient_at(locs, t)

    def vertex_speeds(self, forest, t):
        verts = forest.leaf_verts.reshape(-1, 2)
        u = self.velocity_at(verts, t)
        return np.hypot(u[:, 0], u[:, 1]).reshape(-1, 4)


@dataclass
class RigidRotation(AnalyticField):
    """u = omega * (y - cy, -(x - cx)); clockwise for positive omega.

    Divergence-free with zero strain rate; trajectories are circles traversed
    at constant angular velocity, x(t) = c + R(-omega t) (x0 - c).
    """

    omega: float = 1.0
    center: tuple[float, float] = (0.0, 0.0)

    def velocity_at(self, x, t):
        cx, cy = self.center
        return self.omega * np.column_stack([x[:, 1] - cy, -(x[:, 0] - cx)])

    def gradient_at(self, x, t):
        g = np.array([[0.0, self.omega], [-self.omega, 0.0]])
        return np.broadcast_to(g, (len(x), 2, 2)).copy()

    def trajectory(self, x0, t):
        """Exact particle position after time t."""
        cx, cy = self.center
        a = self.omega * t
        dx, dy = x0[0] - cx, x0[1] - cy
        return np.array(
            [
                cx + np.cos(a) * dx + np.sin(a) * dy,
                cy - np.sin(a) * dx + np.cos(a) * dy,
            ]
        )


@dataclass
class Shear(AnalyticField):
    """Simple shear u = (gamma * y, 0); constant nilpotent gradient."""

    gamma: float = 1.0

    def velocity_at(self, x, t):
        return np.column_stack([self.gamma * x[:, 1], np.zeros(len(x))])

    def gradient_at(self, x, t):
        g = np.array([[0.0, self.gamma], [0.0, 0.0]])
        return np.broadcast_to(g, (len(x), 2, 2)).copy()

    def trajectory(self, x0, t):
        x0 = np.asarray(x0, dtype=float)
        return np.array([x0[0] + t * self.gamma * x0[1], x0[1]])


@dataclass
class Constant(AnalyticField):
    c: tuple[float, float] = (1.0, 0.0)

    def velocity_at(self, x, t):
        return np.broadcast_to(np.asarray(self.c, dtype=float), (len(x), 2)).copy()

    def gradient_at(self, x, t):
        return np.zeros((len(x), 2, 2))

    def trajectory(self, x0, t):
        return np.asarray(x0, dtype=float) + t * np.asarray(self.c, dtype=float)


@dataclass
class UnsteadyGyre(AnalyticField):
    """Single gyre in the unit square, tangential to the boundary.

    Stream function (A/pi) sin(pi x) sin(pi y) cos(omega_t t); omega_t = 0
    gives a steady circulation around (0.5, 0.5).
    """

    amplitude: float = 1.0
    omega_t: float = 0.0

    def velocity_at(self, x, t):
        a = self.amplitude * np.cos(self.omega_t * t)
        px = np.pi * x[:, 0]
        py = np.pi * x[:, 1]
        return np.column_stack(
            [a * np.sin(px) * np.cos(py), -a * np.cos(px) * np.sin(py)]
        )

    def gradient_at(self, x, t):
        a = self.amplitude * np.cos(self.omega_t * t)
        px = np.pi * x[:, 0]
        py = np.pi * x[:, 1]
        out = np.empty((len(x), 2, 2))
        out[:, 0, 0] = a * np.pi * np.cos(px) * np.cos(py)
        out[:, 0, 1] = -a * np.pi * np.sin(px) * np.sin(py)
        out[:, 1, 0] = a * np.pi * np.sin(px) * np.sin(py)
        out[:, 1, 1] = -a * np.pi * np.cos(px) * np.cos(py)
        return out


# ---------------------------------------------------------------------------
# discrete Q1 snapshots
# ---------------------------------------------------------------------------


def _bilinear_weights(refs: np.ndarray) -> np.ndarray:
    """(n, 4) Q1 shape function values at reference points."""
    xi = refs[:, 0]
    eta = refs[:, 1]
    return np.column_stack(
        [(1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta]
    )


class DiscreteField(VelocityField):
    """Q1 velocity snapshot: one vector per leaf vertex at a fixed time."""

    def __init__(
        self, forest: Forest, vertex_values: np.ndarray, t: float, steady: bool = False
    ):
        vertex_values = np.asarray(vertex_values, dtype=float)
        if vertex_values.shape != (forest.n_leaves, 4, 2):
            raise FieldError(
                f"vertex values must have shape {(forest.n_leaves, 4, 2)}"
            )
        self.forest = forest
        self.values = vertex_values
        self.t = float(t)
        self.steady = steady

    @classmethod
    def sample(
        cls, forest: Forest, analytic: AnalyticField, t: float, steady: bool = False
    ):
        """Snapshot an analytic field at the leaf vertices."""
        verts = forest.leaf_verts.reshape(-1, 2)
        u = analytic.velocity_at(verts, t)
        return cls(forest, u.reshape(-1, 4, 2), t, steady=steady)

    def time_bracket(self):
        return None if self.steady else (self.t, self.t)

    def evaluate(self, cell, ref_point, t):
        _check_bracket(self, t)
        pos = self.forest.leaf_pos[cell.key]
        w = _bilinear_weights(np.asarray(ref_point, dtype=float)[None, :])[0]
        return w @ self.values[pos]

    def evaluate_gradient(self, cell, ref_point, t):
        _check_bracket(self, t)
        pos = self.forest.leaf_pos[cell.key]
        u = self.values[pos]
        xi, eta = ref_point
        du_dxi = (1 - eta) * (u[1] - u[0]) + eta * (u[3] - u[2])
        du_deta = (1 - xi) * (u[2] - u[0]) + xi * (u[3] - u[1])
        jac = mapping_jacobian(cell.vertices, ref_point)
        du_dref = np.column_stack([du_dxi, du_deta])
        return du_dref @ np.linalg.inv(jac)

    def evaluate_batch(self, forest, leaf_idx, refs, locs, t):
        _check_bracket(self, t)
        w = _bilinear_weights(refs)
        vals = self.values[leaf_idx]  # (n, 4, 2)
        return np.einsum("nj,njk->nk", w, vals)

    def vertex_speeds(self, forest, t):
        return np.hypot(self.values[:, :, 0], self.values[:, :, 1])


class TimeInterpolatedField(VelocityField):
    """Linear-in-time combination of two snapshots (or any two fields).

    Evaluation at the bracket endpoints reproduces the snapshot bitwise.
    Extrapolation beyond the bracket must be requested explicitly.
    """

    def __init__(
        self,
        field_n: VelocityField,
        t_n: float,
        field_np1: VelocityField,
        t_np1: float,
        allow_extrapolation: bool = False,
    ):
        if not t_np1 > t_n:
            raise FieldError("snapshot times must be increasing")
        self.field_n = field_n
        self.field_np1 = field_np1
        self.t_n = float(t_n)
        self.t_np1 = float(t_np1)
        self.allow_extrapolation = allow_extrapolation

    def time_bracket(self):
        return None if self.allow_extrapolation else (self.t_n, self.t_np1)

    def _theta(self, t: float) -> float:
        _check_bracket(self, t)
        return (t - self.t_n) / (self.t_np1 - self.t_n)

    def evaluate(self, cell, ref_point, t):
        theta = self._theta(t)
        u0 = self.field_n.evaluate(cell, ref_point, self.t_n)
        u1 = self.field_np1.evaluate(cell, ref_point, self.t_np1)
        return (1.0 - theta) * u0 + theta * u1

    def evaluate_gradient(self, cell, ref_point, t):
        theta = self._theta(t)
        g0 = self.field_n.evaluate_gradient(cell, ref_point, self.t_n)
        g1 = self.field_np1.evaluate_gradient(cell, ref_point, self.t_np1)
        return (1.0 - theta) * g0 + theta * g1

    def evaluate_batch(self, forest, leaf_idx, refs, locs, t):
        theta = self._theta(t)
        u0 = self.field_n.evaluate_batch(forest, leaf_idx, refs, locs, self.t_n)
        u1 = self.field_np1.evaluate_batch(forest, leaf_idx, refs, locs, self.t_np1)
        return (1.0 - theta) * u0 + theta * u1

    def vertex_speeds(self, forest, t):
        theta = self._theta(t)
        s0 = self.field_n.vertex_speeds(forest, self.t_n)
        s1 = self.field_np1.vertex_speeds(forest, self.t_np1)
        return (1.0 - theta) * s0 + theta * s1


# ---------------------------------------------------------------------------
# snapshot files
# ---------------------------------------------------------------------------


def _vertex_ids(forest: Forest):
    """Deduplicated vertex enumeration via exact lattice corner coordinates.

    Returns (corner ids per leaf (L, 4) array, list of representative
    coordinates per vertex id).
    """
    ids = np.empty((forest.n_leaves, 4), dtype=np.int64)
    coords: list[np.ndarray] = []
    seen: dict[tuple[int, int], int] = {}
    for pos, cell in enumerate(forest.leaves):
        gx, gy, sx, sy = forest._lattice_rects[pos]
        corners = ((gx, gy), (gx + sx, gy), (gx, gy + sy), (gx + sx, gy + sy))
        for j, lattice in enumerate(corners):
            vid = seen.get(lattice)
            if vid is None:
                vid = len(coords)
                seen[lattice] = vid
                coords.append(cell.vertices[j])
            ids[pos, j] = vid
    return ids, coords


def save_snapshot(field: DiscreteField, path) -> None:
    """CSV `vertex_id,x,y,ux,uy`; pair with a forest dump for restore."""
    ids, coords = _vertex_ids(field.forest)
    values = np.zeros((len(coords), 2))
    for pos in range(field.forest.n_leaves):
        values[ids[pos]] = field.values[pos]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["vertex_id", "x", "y", "ux", "uy"])
        for vid, xy in enumerate(coords):
            writer.writerow([vid, repr(float(xy[0])), repr(float(xy[1])),
                             repr(float(values[vid, 0])), repr(float(values[vid, 1]))])


def load_snapshot(forest: Forest, path, t: float) -> DiscreteField:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = {int(r["vertex_id"]): (float(r["ux"]), float(r["uy"])) for r in reader}
    ids, coords = _vertex_ids(forest)
    if set(rows) != set(range(len(coords))):
        raise FieldError("snapshot vertex ids do not match the forest")
    values = np.empty((forest.n_leaves, 4, 2))
    for pos in range(forest.n_leaves):
        for j in range(4):
            values[pos, j] = rows[ids[pos, j]]
    return DiscreteField(forest, values, t)
