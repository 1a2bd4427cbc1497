"""Initial particle populations.

Supports density-weighted random placement (bounding-box rejection or
Metropolis-Hastings sampling inside each cell), prescribed global positions,
and per-cell reference-coordinate patterns.  Counts are planned so that the
global particle total and the id range are exact for any rank count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import (
    Cell,
    CellKey,
    Forest,
    contains_reference,
    invert_bilinear_batch,
    mapping_jacobian,
)
from .store import ParticleData, Store

REJECTION_ATTEMPT_CAP = 10_000
MH_BURN_IN = 100
MH_NULL_REJECTION_CAP = 50


class GenerationError(Exception):
    pass


def rank_rng(global_seed: int, rank: int) -> np.random.Generator:
    """Independent reproducible stream for (global_seed, rank)."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=global_seed, spawn_key=(rank,))
    )


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------


@dataclass
class GenerationPlan:
    rank: int
    keys: list[CellKey]  # owned leaves, ascending key order
    cum_weights: np.ndarray  # accumulated per-cell weights
    local_weight: float
    count: int  # particles this rank generates
    start_id: int  # exclusive prefix sum of counts


def cell_weight(cell: Cell, density) -> float:
    """Midpoint-quadrature weight: density at the cell center times cell area."""
    return float(density(cell.center)) * cell.area


def plan_generation(
    forest: Forest, owned_keys_per_rank, density, n_global: int
) -> list[GenerationPlan]:
    """Split n_global particles across ranks proportionally to density weight.

    Uses largest-remainder rounding (ties to the lower rank) so the counts sum
    to n_global exactly; start ids are the exclusive prefix sum.
    """
    if n_global < 0:
        raise GenerationError("n_global must be non-negative")
    plans = []
    for rank, owned in enumerate(owned_keys_per_rank):
        keys = sorted(owned)
        weights = np.array([cell_weight(forest.leaf(k), density) for k in keys])
        if np.any(weights < 0):
            raise GenerationError("density must be non-negative")
        cum = np.cumsum(weights) if len(weights) else np.zeros(0)
        local = float(cum[-1]) if len(cum) else 0.0
        plans.append(GenerationPlan(rank, keys, cum, local, 0, 0))

    global_weight = sum(p.local_weight for p in plans)
    if global_weight <= 0.0:
        raise GenerationError("total density weight is zero")

    shares = [n_global * p.local_weight / global_weight for p in plans]
    counts = [int(np.floor(s)) for s in shares]
    remainder = n_global - sum(counts)
    order = sorted(range(len(plans)), key=lambda r: (-(shares[r] - counts[r]), r))
    for r in order[:remainder]:
        counts[r] += 1

    start = 0
    for plan, count in zip(plans, counts):
        plan.count = count
        plan.start_id = start
        start += count
    return plans


def draw_cell(plan: GenerationPlan, rng: np.random.Generator) -> CellKey:
    """Pick an owned cell with probability proportional to its weight."""
    if plan.local_weight <= 0.0:
        raise GenerationError(f"rank {plan.rank} has zero local weight")
    u = rng.random() * plan.local_weight
    idx = int(np.searchsorted(plan.cum_weights, u, side="right"))
    idx = min(idx, len(plan.keys) - 1)
    return plan.keys[idx]


# ---------------------------------------------------------------------------
# in-cell samplers
# ---------------------------------------------------------------------------


def sample_in_cell_rejection(cell: Cell, rng: np.random.Generator):
    """Uniform location in the cell by rejection from its bounding box.

    Returns (location, reference_location).
    """
    x0, x1, y0, y1 = cell.bounding_box()
    for _ in range(REJECTION_ATTEMPT_CAP):
        u = rng.random(2)
        point = np.array([x0 + (x1 - x0) * u[0], y0 + (y1 - y0) * u[1]])
        ref = cell.map_to_reference(point)
        if ref is not None:
            return point, ref
    raise GenerationError(
        f"rejection sampling exceeded {REJECTION_ATTEMPT_CAP} draws in cell "
        f"{cell.key}; cell-to-bounding-box volume ratio is pathological"
    )


def sample_in_cell_rejection_batch(
    cell: Cell, count: int, rng: np.random.Generator
):
    """Batched bounding-box rejection: `count` uniform locations in the cell.

    Returns (locations, reference_locations) arrays of shape (count, 2).
    """
    x0, x1, y0, y1 = cell.bounding_box()
    locs = np.empty((count, 2))
    refs = np.empty((count, 2))
    have = 0
    for _ in range(REJECTION_ATTEMPT_CAP):
        if have >= count:
            return locs, refs
        m = count - have
        u = rng.random((m, 2))
        pts = np.column_stack((x0 + (x1 - x0) * u[:, 0], y0 + (y1 - y0) * u[:, 1]))
        r, ok = invert_bilinear_batch(
            np.broadcast_to(cell.vertices, (m, 4, 2)), pts
        )
        good = ok & contains_reference(r)
        g = int(good.sum())
        locs[have : have + g] = pts[good]
        refs[have : have + g] = r[good]
        have += g
    if have >= count:
        return locs, refs
    raise GenerationError(
        f"rejection sampling exceeded {REJECTION_ATTEMPT_CAP} rounds in cell "
        f"{cell.key}; cell-to-bounding-box volume ratio is pathological"
    )


def _reference_density(cell: Cell, density):
    def rho_hat(ref):
        jac = mapping_jacobian(cell.vertices, ref)
        return float(density(cell.map_to_real(ref))) * abs(float(np.linalg.det(jac)))

    return rho_hat


def sample_in_cell_mh(cell: Cell, density, count: int, rng: np.random.Generator):
    """Metropolis-Hastings chain targeting the density pulled back to the
    reference cell (uniform proposal).

    The chain is thinned by J = (longest rejection streak) + 1 so repeated
    states do not distort the sample.  Returns `count` (location, reference)
    pairs.
    """
    rho_hat = _reference_density(cell, density)
    state = rng.random(2)
    state_rho = rho_hat(state)

    null_rejections = 0
    for _ in range(MH_BURN_IN):
        state, state_rho, accepted = _mh_step(rho_hat, state, state_rho, rng)
        if not accepted and state_rho == 0.0:
            null_rejections += 1
            if null_rejections >= MH_NULL_REJECTION_CAP:
                raise GenerationError(
                    f"density appears to vanish on cell {cell.key}"
                )
        else:
            null_rejections = 0

    chain: list[np.ndarray] = []
    max_streak = 0
    streak = 0
    while True:
        state, state_rho, accepted = _mh_step(rho_hat, state, state_rho, rng)
        if accepted:
            streak = 0
        else:
            streak += 1
            max_streak = max(max_streak, streak)
        chain.append(state)
        thin = max_streak + 1
        if len(chain) >= count * thin:
            samples = chain[thin - 1 :: thin][:count]
            if len(samples) == count:
                break
    return [(cell.map_to_real(ref), ref) for ref in samples]


def _mh_step(rho_hat, state, state_rho, rng):
    proposal = rng.random(2)
    prop_rho = rho_hat(proposal)
    if state_rho == 0.0:
        accept = prop_rho > 0.0
    else:
        ratio = prop_rho / state_rho
        accept = ratio >= 1.0 or rng.random() < ratio
    if accept:
        return proposal, prop_rho, True
    return state, state_rho, False


# ---------------------------------------------------------------------------
# rank-level generation
# ---------------------------------------------------------------------------


def generate_random(
    store: Store,
    forest: Forest,
    plan: GenerationPlan,
    density,
    rng: np.random.Generator,
    sampler: str = "rejection",
) -> int:
    """Generate this rank's share of a random population into its store."""
    if sampler not in ("rejection", "mh"):
        raise GenerationError(f"unknown sampler {sampler!r}")
    if plan.count == 0:
        return 0
    if plan.local_weight <= 0.0:
        raise GenerationError(f"rank {plan.rank} has zero local weight")
    # One batched draw consumes the stream exactly like per-particle calls to
    # draw_cell; keys are already in ascending order.
    u = rng.random(plan.count) * plan.local_weight
    idx = np.minimum(
        np.searchsorted(plan.cum_weights, u, side="right"), len(plan.keys) - 1
    )
    counts = np.bincount(idx, minlength=len(plan.keys))

    next_id = plan.start_id
    pairs = []
    for ci in np.flatnonzero(counts):
        key = plan.keys[ci]
        cell = forest.leaf(key)
        n = int(counts[ci])
        if sampler == "mh":
            located = sample_in_cell_mh(cell, density, n, rng)
        else:
            locs, refs = sample_in_cell_rejection_batch(cell, n, rng)
            located = zip(locs, refs)
        for loc, ref in located:
            pairs.append((key, ParticleData(next_id, np.asarray(loc), np.asarray(ref))))
            next_id += 1
    return store.bulk_insert_sorted(pairs)


def insert_prescribed(
    store: Store, forest: Forest, owned_keys, points
) -> tuple[int, int]:
    """Insert prescribed global positions; particle id = index in the list.

    A point is inserted on the rank owning its containing leaf (face ties use
    the mesh tie-break).  Returns (inserted, skipped) counts for this rank;
    skipped counts points outside this rank's owned bounding box or cells.
    """
    owned = set(owned_keys)
    if owned:
        boxes = np.array([forest.leaf(k).bounding_box() for k in owned])
        bbox = (
            boxes[:, 0].min(),
            boxes[:, 1].max(),
            boxes[:, 2].min(),
            boxes[:, 3].max(),
        )
    else:
        bbox = None

    tol = 1e-12
    pairs = []
    skipped = 0
    for pid, point in enumerate(points):
        point = np.asarray(point, dtype=float)
        if bbox is None or not (
            bbox[0] - tol <= point[0] <= bbox[1] + tol
            and bbox[2] - tol <= point[1] <= bbox[3] + tol
        ):
            skipped += 1
            continue
        cell = forest.locate(point)
        if cell is None or cell.key not in owned:
            skipped += 1
            continue
        ref = cell.map_to_reference(point)
        pairs.append((cell.key, ParticleData(pid, point, ref)))
    pairs.sort(key=lambda kp: kp[0])
    inserted = store.bulk_insert_sorted(pairs)
    return inserted, skipped


def insert_reference_per_cell(
    store: Store, forest: Forest, owned_keys, ref_coords, start_id: int
) -> int:
    """One particle per owned leaf per reference coordinate, in key order."""
    refs = [np.asarray(r, dtype=float) for r in ref_coords]
    for ref in refs:
        if not contains_reference(ref, eps=0.0):
            raise GenerationError(f"reference coordinate {ref} outside [0,1]^2")
    next_id = start_id
    pairs = []
    for key in sorted(owned_keys):
        cell = forest.leaf(key)
        for ref in refs:
            pairs.append((key, ParticleData(next_id, cell.map_to_real(ref), ref.copy())))
            next_id += 1
    return store.bulk_insert_sorted(pairs)
