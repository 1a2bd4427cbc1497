"""Simulated parallel runtime: mailboxes, lockstep and threaded engines.

Rank programs are generators that yield a phase tag at every synchronization
point; everything between two yields is rank-local compute plus message
posting.  The matching receive always happens in a later segment than its
send, so the inline engine can run ranks one after another in rank order and
still satisfy every receive.  The threaded engine runs the same programs
concurrently (one thread per rank) with blocking queues and a barrier per
segment, so protocol behavior is identical.

Tags starting with "collective:" hand control to a coordinator callback that
runs exactly once per segment (repartition, output, conservation checks).
"""

from __future__ import annotations

import queue
import threading

RECV_TIMEOUT = 120.0  # seconds; a blown deadline means a protocol deadlock


class RuntimeError_(Exception):
    pass


class Network:
    """Point-to-point FIFO channels keyed by (src, dst, tag)."""

    def __init__(self):
        self._channels: dict[tuple, queue.SimpleQueue] = {}
        self._lock = threading.Lock()

    def _channel(self, key) -> queue.SimpleQueue:
        with self._lock:
            ch = self._channels.get(key)
            if ch is None:
                ch = self._channels[key] = queue.SimpleQueue()
            return ch

    def mailbox(self, rank: int) -> "Mailbox":
        return Mailbox(self, rank)


class Mailbox:
    """Rank-bound view of the network."""

    def __init__(self, network: Network, rank: int):
        self._network = network
        self.rank = rank

    def send(self, dst: int, tag: str, payload: bytes) -> None:
        self._network._channel((self.rank, dst, tag)).put(payload)

    def recv(self, src: int, tag: str) -> bytes:
        try:
            return self._network._channel((src, self.rank, tag)).get(
                timeout=RECV_TIMEOUT
            )
        except queue.Empty:
            raise RuntimeError_(
                f"rank {self.rank}: timed out waiting for ({tag}) from rank {src}"
            ) from None


def run_lockstep(programs, collective=None) -> None:
    """Drive rank program generators segment by segment in rank order.

    All ranks must yield the same tag at every segment boundary; a
    "collective:" tag triggers the coordinator callback once.
    """
    gens = list(programs)
    while True:
        tags = []
        for rank, gen in enumerate(gens):
            try:
                tags.append(next(gen))
            except StopIteration:
                tags.append(None)
        live = [t for t in tags if t is not None]
        if not live:
            return
        if len(set(tags)) != 1:
            raise RuntimeError_(f"ranks desynchronized: segment tags {tags}")
        tag = live[0]
        if tag.startswith("collective:") and collective is not None:
            collective(tag)


def run_threaded(programs, collective=None) -> None:
    """Run one thread per rank; a barrier per segment, coordinator on rank 0."""
    gens = list(programs)
    n = len(gens)
    barrier = threading.Barrier(n)
    tags = [None] * n
    errors: list[BaseException] = []

    def worker(rank: int) -> None:
        gen = gens[rank]
        while True:
            try:
                tags[rank] = next(gen)
            except StopIteration:
                tags[rank] = None
            except BaseException as exc:  # surface rank failures to the caller
                errors.append(exc)
                tags[rank] = None
            try:
                barrier.wait()
            except threading.BrokenBarrierError:
                return
            if errors:
                return
            live = [t for t in tags if t is not None]
            if not live:
                return
            if rank == 0:
                if len(set(tags)) != 1:
                    errors.append(
                        RuntimeError_(f"ranks desynchronized: segment tags {tags}")
                    )
                elif live[0].startswith("collective:") and collective is not None:
                    try:
                        collective(live[0])
                    except BaseException as exc:
                        errors.append(exc)
            barrier.wait()
            if errors:
                return
            if tags[rank] is None:
                # exhausted, but keep pace with live ranks so barriers line up
                if not any(t is not None for t in tags):
                    return

    threads = [
        threading.Thread(target=worker, args=(r,), name=f"rank-{r}") for r in range(n)
    ]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]


ENGINES = {"lockstep": run_lockstep, "threaded": run_threaded}
