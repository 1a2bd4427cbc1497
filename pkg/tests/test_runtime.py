"""Simulated multi-rank runtime: mailboxes, lockstep and threaded engines."""

import pytest

from picforest.runtime import ENGINES, Mailbox, Network, RuntimeError_, run_lockstep, run_threaded


def test_mailbox_fifo_per_channel():
    net = Network()
    m0, m1 = net.mailbox(0), net.mailbox(1)
    m0.send(1, "a", b"first")
    m0.send(1, "a", b"second")
    m0.send(1, "b", b"other")
    assert m1.recv(0, "a") == b"first"
    assert m1.recv(0, "a") == b"second"
    assert m1.recv(0, "b") == b"other"


def test_recv_times_out_on_missing_message(monkeypatch):
    import picforest.runtime as rt

    monkeypatch.setattr(rt, "RECV_TIMEOUT", 0.05)
    net = Network()
    m1 = net.mailbox(1)
    with pytest.raises(RuntimeError_):
        m1.recv(0, "never")


def _pingpong_programs(net, log):
    def rank0():
        net.mailbox(0).send(1, "x", b"ping")
        yield "phase"
        log.append(net.mailbox(0).recv(1, "x"))

    def rank1():
        net.mailbox(1).send(0, "x", b"pong")
        yield "phase"
        log.append(net.mailbox(1).recv(0, "x"))

    return [rank0(), rank1()]


@pytest.mark.parametrize("engine", sorted(ENGINES))
def test_engines_run_pingpong(engine):
    net = Network()
    log = []
    ENGINES[engine](_pingpong_programs(net, log))
    assert sorted(log) == [b"ping", b"pong"]


def test_lockstep_detects_phase_divergence():
    def a():
        yield "one"

    def b():
        yield "different"

    with pytest.raises(RuntimeError_):
        run_lockstep([a(), b()])


@pytest.mark.parametrize("runner", [run_lockstep, run_threaded])
def test_collective_runs_once_per_sync_point(runner):
    calls = []

    def prog(rank):
        yield "collective:tick"
        yield "collective:tick"

    runner([prog(0), prog(1), prog(2)], collective=lambda tag: calls.append(tag))
    assert calls == ["collective:tick", "collective:tick"]


def test_threaded_propagates_worker_errors():
    def good():
        yield "phase"

    def bad():
        raise ValueError("boom")
        yield "phase"  # pragma: no cover

    with pytest.raises(Exception):
        run_threaded([good(), bad()])
