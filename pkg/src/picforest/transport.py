"""Particle transport: cell re-association, discards, and rank exchange.

After every advection (sub)step each particle is re-associated with a cell:
kept in place, moved to a nearby owned cell, serialized to the owning
neighbor rank, or discarded.  Cross-rank traffic uses a two-phase protocol
(counts first, then fixed-size wire records) over point-to-point mailboxes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .mesh import CellKey, Forest, contains_reference, invert_bilinear_batch
from .store import ParticleData, Store


class ProtocolError(Exception):
    pass


# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------

_HEADER = "<Q2d2dIQ"  # id, location, reference_location, dest level, dest index


def wire_struct(stride: int) -> struct.Struct:
    """Fixed little-endian record layout for one particle."""
    return struct.Struct(_HEADER + f"{stride}d")


def serialize_particle(record: ParticleData, dest: CellKey, stride: int) -> bytes:
    props = record.properties if record.properties is not None else ()
    return wire_struct(stride).pack(
        record.id,
        float(record.location[0]),
        float(record.location[1]),
        float(record.reference_location[0]),
        float(record.reference_location[1]),
        dest.level,
        dest.index,
        *props,
    )

def deserialize_particles(payload: bytes, stride: int):
    """Decode a byte buffer into (dest CellKey, ParticleData) pairs."""
    codec = wire_struct(stride)
    if len(payload) % codec.size:
        raise ProtocolError("payload length is not a whole number of records")
    out = []
    for fields in codec.iter_unpack(payload):
        dest = CellKey(fields[5], fields[6])
        out.append(
            (
                dest,
                ParticleData(
                    fields[0],
                    np.array(fields[1:3]),
                    np.array(fields[3:5]),
                    np.array(fields[7:], dtype=float),
                ),
            )
        )
    return out


# ---------------------------------------------------------------------------
# sorting particles into cells
# ---------------------------------------------------------------------------


@dataclass
class SortStats:
    kept: int = 0
    moved_local: int = 0
    sent: int = 0
    received: int = 0
    discarded_out_of_domain: int = 0
    discarded_unreachable: int = 0
    first_candidate_hits: int = 0
    fallback_resorts: int = 0
    discard_log: list = field(default_factory=list)

    @property
    def cross_cell_moves(self) -> int:
        return (
            self.moved_local
            + self.sent
            + self.discarded_out_of_domain
            + self.discarded_unreachable
        )

    @property
    def processed(self) -> int:
        return self.kept + self.cross_cell_moves

    def merge(self, other: "SortStats") -> None:
        self.kept += other.kept
        self.moved_local += other.moved_local
        self.sent += other.sent
        self.received += other.received
        self.discarded_out_of_domain += other.discarded_out_of_domain
        self.discarded_unreachable += other.discarded_unreachable
        self.first_candidate_hits += other.first_candidate_hits
        self.fallback_resorts += other.fallback_resorts
        self.discard_log.extend(other.discard_log)


def _candidate_order(forest: Forest, cell, x: np.ndarray):
    """Vertex neighbors sorted by descending a.b score.

    a points from the closest cell vertex to the particle, b from that vertex
    to each candidate's center.  Candidates that touch the closest vertex are
    searched before the remaining vertex neighbors: a raw a.b sort alone would
    rank a diagonal neighbor above the face neighbor actually crossed (its
    center lies farther along a), which is wrong for most face crossings.
    Distance ties pick the lowest vertex index; score ties the lower cell key.
    """
    pos = forest.leaf_pos[cell.key]
    verts = cell.vertices
    d2 = (verts[:, 0] - x[0]) ** 2 + (verts[:, 1] - x[1]) ** 2
    vsel = int(np.argmin(d2))
    v = verts[vsel]
    a = x - v
    scored = []
    for m, other in enumerate(forest.nb_pad[pos]):
        if other < 0:
            break
        nb = forest.leaves[other]
        at_vertex = bool(forest.nb_at_vertex[pos, m, vsel])
        scored.append(
            (not at_vertex, -float(np.dot(a, nb.center - v)), nb.key, nb)
        )
    scored.sort(key=lambda s: (s[0], s[1], s[2]))
    return [nb for _, _, _, nb in scored]


def sort_into_cells(
    store: Store,
    forest: Forest,
    topology=None,
    my_rank: int = 0,
) -> tuple[SortStats, dict[int, bytearray]]:
    """Re-associate every particle with a cell after a position update.

    Returns sort statistics and per-neighbor-rank outboxes of serialized
    particles whose destination cell is a ghost (owned elsewhere).
    """
    stats = SortStats()
    outboxes: dict[int, bytearray] = {}
    keys, rows, cell_index = store.flat_rows()
    if len(rows) == 0:
        return stats, outboxes

    owners = topology.leaf_owners if topology is not None else None
    pool = store.pool
    leaf_of_key = np.array([forest.leaf_pos[k] for k in keys], dtype=np.int64)
    leaf_idx = leaf_of_key[cell_index]
    points = pool.loc[rows]
    refs, ok = invert_bilinear_batch(forest.leaf_verts[leaf_idx], points)
    inside = ok & contains_reference(refs)

    kept_rows = rows[inside]
    pool.ref[kept_rows] = refs[inside]
    stats.kept = int(inside.sum())

    stride = store.stride
    esc = np.flatnonzero(~inside)
    if len(esc):
        e_rows = rows[esc]
        e_leaf = leaf_idx[esc]
        xs = points[esc]
        n_esc = len(esc)
        ar = np.arange(n_esc)

        # Score every neighbor of every escapee at once, then try candidates
        # in order, one batched inversion per slot.  Distance ties pick the
        # lowest vertex index (argmin), score ties the lower cell key, and
        # the -1 padding sorts last.
        verts = forest.leaf_verts[e_leaf]                      # (n, 4, 2)
        d2 = ((verts - xs[:, None, :]) ** 2).sum(axis=2)
        vsel = d2.argmin(axis=1)
        v = verts[ar, vsel]
        a = xs - v
        nb = forest.nb_pad[e_leaf]                             # (n, M)
        safe = np.where(nb >= 0, nb, 0)
        score = ((forest.leaf_centers[safe] - v[:, None, :]) * a[:, None, :]).sum(
            axis=2
        )
        at_v = np.take_along_axis(
            forest.nb_at_vertex[e_leaf], vsel[:, None, None], axis=2
        )[:, :, 0]
        group = np.where(nb >= 0, np.where(at_v, 0, 1), 2)
        order = np.lexsort((forest.key_rank[safe], -score, group))

        dest = np.full(n_esc, -1, dtype=np.int64)
        dref = np.empty((n_esc, 2))
        pending = ar
        for k in range(nb.shape[1]):
            if pending.size == 0:
                break
            slot = order[pending, k]
            usable = group[pending, slot] < 2
            sub = pending[usable]
            if sub.size:
                cand = nb[sub, slot[usable]]
                r, okk = invert_bilinear_batch(forest.leaf_verts[cand], xs[sub])
                good = okk & contains_reference(r)
                hits = sub[good]
                dest[hits] = cand[good]
                dref[hits] = r[good]
                if k == 0:
                    stats.first_candidate_hits = int(good.sum())
            pending = pending[dest[pending] < 0]

        if owners is None:
            local = dest >= 0
        else:
            local = (dest >= 0) & (
                owners[np.where(dest >= 0, dest, 0)] == my_rank
            )
        pool.ref[e_rows[local]] = dref[local]
        new_leaf = np.where(local, dest, -1)

        # Remote sends, fallback re-sorts, and discards are rarer; resolve the
        # unplaced ones with one batched point location, then finish per
        # particle.
        nonlocal_idx = np.flatnonzero(~local)
        unresolved = nonlocal_idx[dest[nonlocal_idx] < 0]
        fb_pos = {}
        if unresolved.size:
            lpos, lref = forest.locate_batch(xs[unresolved])
            fb_pos = {
                int(i): (int(p), r) for i, p, r in zip(unresolved, lpos, lref)
            }
        for i in nonlocal_idx:
            row = int(e_rows[i])
            old_key = forest.leaves[e_leaf[i]].key
            x = pool.loc[row]
            if dest[i] >= 0:
                outboxes.setdefault(int(owners[dest[i]]), bytearray()).extend(
                    serialize_particle(
                        ParticleData(int(pool.ids[row]), x, dref[i], pool.props[row]),
                        forest.leaves[dest[i]].key,
                        stride,
                    )
                )
                store.release_row(old_key, row)
                stats.sent += 1
                continue

            hit_pos, hit_ref = fb_pos[int(i)]
            if hit_pos >= 0 and (owners is None or int(owners[hit_pos]) == my_rank):
                pool.ref[row] = hit_ref
                new_leaf[i] = hit_pos
            else:
                pid = int(pool.ids[row])
                if hit_pos < 0:
                    stats.discarded_out_of_domain += 1
                    stats.discard_log.append((pid, float(x[0]), float(x[1]), "outside"))
                else:
                    stats.discarded_unreachable += 1
                    stats.discard_log.append(
                        (pid, float(x[0]), float(x[1]), "unreachable")
                    )
                store.release_row(old_key, row)

        # re-link moved particles in bulk, in ascending destination key order
        mv = np.flatnonzero(new_leaf >= 0)
        stats.moved_local = len(mv)
        if len(mv):
            leaves = forest.leaves

            def _groups(leaf_ids, rows_arr):
                order = np.argsort(forest.key_rank[leaf_ids], kind="stable")
                lo, ro = leaf_ids[order], rows_arr[order]
                cuts = np.flatnonzero(np.diff(lo)) + 1
                starts = np.concatenate(([0], cuts))
                ends = np.concatenate((cuts, [len(lo)]))
                return [(leaves[lo[s]].key, ro[s:e]) for s, e in zip(starts, ends)]

            store.rebind_groups(
                _groups(e_leaf[mv], e_rows[mv]), _groups(new_leaf[mv], e_rows[mv])
            )

    return stats, outboxes


# ---------------------------------------------------------------------------
# two-phase neighbor exchange
# ---------------------------------------------------------------------------

_COUNT = struct.Struct("<q")


def exchange_post(mailbox, peers, outboxes, stride: int) -> None:
    """Posting half of the two-phase exchange: counts first, then payloads."""
    peers = sorted(peers)
    record = wire_struct(stride).size
    for peer in peers:
        buf = outboxes.get(peer, b"")
        mailbox.send(peer, "count", _COUNT.pack(len(buf) // record))
    for peer in peers:
        buf = outboxes.get(peer, b"")
        if buf:
            mailbox.send(peer, "payload", bytes(buf))


def exchange_collect(mailbox, my_rank: int, peers, stride: int):
    """Receiving half: counts, then exactly the announced payload bytes.

    Returns the decoded (dest CellKey, ParticleData) records received.
    """
    peers = sorted(peers)
    record = wire_struct(stride).size
    expected = {}
    for peer in peers:
        (expected[peer],) = _COUNT.unpack(mailbox.recv(peer, "count"))
    received = []
    for peer in peers:
        if expected[peer] == 0:
            continue
        payload = mailbox.recv(peer, "payload")
        if len(payload) != expected[peer] * record:
            raise ProtocolError(
                f"rank {my_rank}: peer {peer} announced {expected[peer]} records "
                f"but sent {len(payload)} bytes"
            )
        received.extend(deserialize_particles(payload, stride))
    return received


def neighbor_exchange(mailbox, my_rank: int, peers, outboxes, stride: int):
    """Two-phase exchange: record counts first, then payload bytes.

    All sends are posted before any wait, so no rank ever blocks on a rank
    that is not one of its peers.  Returns the decoded (dest CellKey,
    ParticleData) records received.
    """
    exchange_post(mailbox, peers, outboxes, stride)
    return exchange_collect(mailbox, my_rank, peers, stride)


def insert_received(
    store: Store, forest: Forest, records, topology=None, my_rank: int = 0
) -> SortStats:
    """Insert exchanged particles at their transmitted destination cells.

    Destination keys made stale by an intervening mesh change fall back to a
    receiver-side re-sort (counted in the stats).
    """
    stats = SortStats()
    owners = topology.leaf_owners if topology is not None else None
    pairs = []
    for dest, record in records:
        pos = forest.leaf_pos.get(dest)
        if pos is not None and (owners is None or int(owners[pos]) == my_rank):
            pairs.append((dest, record))
            continue
        stats.fallback_resorts += 1
        hit = forest.locate(record.location)
        if hit is None:
            stats.discarded_out_of_domain += 1
            stats.discard_log.append(
                (record.id, float(record.location[0]), float(record.location[1]),
                 "outside")
            )
        elif owners is not None and int(owners[forest.leaf_pos[hit.key]]) != my_rank:
            stats.discarded_unreachable += 1
            stats.discard_log.append(
                (record.id, float(record.location[0]), float(record.location[1]),
                 "unreachable")
            )
        else:
            record.reference_location = hit.map_to_reference(record.location)
            pairs.append((hit.key, record))
    pairs.sort(key=lambda kp: kp[0])
    for key, record in pairs:
        store.insert(key, record)
    stats.received = len(pairs)
    return stats


# ---------------------------------------------------------------------------
# ghost layer
# ---------------------------------------------------------------------------


def ghost_outboxes(store: Store, topology, my_rank: int) -> dict[int, bytearray]:
    """Serialize, per neighbor, the owned particles in that neighbor's ghosts."""
    stride = store.stride
    outboxes: dict[int, bytearray] = {}
    for peer in topology.neighbor_sets[my_rank]:
        buf = bytearray()
        for key in topology.boundary_keys(my_rank, peer):
            for view in store.particles_in_cell(key):
                buf.extend(serialize_particle(view.data(), key, stride))
        outboxes[peer] = buf
    return outboxes


def insert_ghosts(ghost_store: Store, records) -> int:
    """Refill a cleared ghost store with received copies, in key order."""
    pairs = sorted(records, key=lambda kp: kp[0])
    for key, record in pairs:
        ghost_store.insert(key, record)
    return len(pairs)


def update_ghost_particles(
    store: Store,
    ghost_store: Store,
    forest: Forest,
    topology,
    my_rank: int,
    mailbox,
) -> int:
    """Rebuild the ghost store with copies of neighbor-rank boundary particles.

    Ghost particles are read-only copies used for interpolation; they are
    never advected or updated.
    """
    ghost_store.clear()
    if topology is None:
        return 0
    records = neighbor_exchange(
        mailbox,
        my_rank,
        topology.neighbor_sets[my_rank],
        ghost_outboxes(store, topology, my_rank),
        store.stride,
    )
    return insert_ghosts(ghost_store, records)
