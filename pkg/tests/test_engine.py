import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles as O
from conftest import line_topology, network
from sfcsim.engine import Queue, Simulator
from sfcsim.errors import PastEvent, UnknownTarget
from sfcsim.model import HEADER_BYTES, AppId, Packet, PacketKind, TlvKind, make_tlv

APP = AppId(1, 1)


def pkt(seq=0, size=1000, flow=1, prio=None, created=0.0):
    tlvs = [] if prio is None else [make_tlv(TlvKind.PRIORITY, prio)]
    extra = sum(t.wire_size for t in tlvs)
    return Packet(APP, PacketKind.REGULAR, flow, seq, size - HEADER_BYTES - extra, tlvs,
                  created_at=created)


class Sink:
    def __init__(self, net, dest=9):
        self.net = net
        self.dest = dest
        self.arrivals = []

    def __call__(self, p):
        self.arrivals.append((self.net.sim.now, p))
        self.net.deliver(p, self.dest)


# -- event kernel ---------------------------------------------------------


def test_schedule_now_runs_before_later_events():
    sim = Simulator()
    log = []
    sim.schedule(1e-9, log.append, "later")
    sim.schedule(0.0, log.append, "now")
    sim.run()
    assert log == ["now", "later"]


def test_equal_times_run_in_schedule_order():
    sim = Simulator()
    log = []
    for i in range(5):
        sim.schedule(1.0, log.append, i)
    sim.run()
    assert log == [0, 1, 2, 3, 4]


def test_cancel_prevents_execution():
    sim = Simulator()
    log = []
    ev = sim.schedule(1.0, log.append, "x")
    sim.cancel(ev)
    sim.run()
    assert log == []


def test_past_event_rejected():
    sim = Simulator()
    sim.schedule(1.0, lambda: None)
    sim.run()
    with pytest.raises(PastEvent):
        sim.schedule(0.5, lambda: None)


def test_rng_streams_are_reproducible_and_independent():
    a, b = Simulator(5), Simulator(5)
    assert a.rng("x").random() == b.rng("x").random()
    assert Simulator(5).rng("x").random() != Simulator(5).rng("y").random()
    assert Simulator(5).rng("x").random() != Simulator(6).rng("x").random()


def test_causality_in_random_schedules():
    sim = Simulator(3)
    rng = sim.rng("test")
    seen = []

    def fire(depth):
        seen.append(sim.now)
        if depth < 4:
            for _ in range(2):
                sim.after(float(rng.random()), fire, depth + 1)

    sim.schedule(0.0, fire, 0)
    sim.run()
    assert seen == sorted(seen)


# -- links ----------------------------------------------------------------


def test_transmit_frame_timing():
    topo = line_topology(2, delay=0.010, bandwidth=1e6)
    net = network(topo)
    sink = Sink(net)
    p = pkt(size=1250)
    assert p.size == 1250
    net.transmit(1, 0, p, sink)
    net.run(1.0)
    t, q = sink.arrivals[0]
    assert t == pytest.approx(O.FRAME_ARRIVAL, abs=1e-12)
    assert q.delay_breakdown["transmission"] == pytest.approx(0.010)
    assert q.delay_breakdown["propagation"] == pytest.approx(0.010)


@pytest.mark.parametrize("loss,expected", [(0.0, 200), (1.0, 0)])
def test_loss_extremes(loss, expected):
    topo = line_topology(2, loss=loss)
    net = network(topo)
    sink = Sink(net)
    for i in range(200):
        p = pkt(seq=i)
        net.record_sent(p)
        net.sim.schedule(i * 1e-3, net.transmit, 1, 0, p, sink)
    rep = net.run(1.0)
    assert len(sink.arrivals) == expected
    c = rep.flows["1"]["counters"]
    assert c.get("delivered", 0) + c.get("dropped_loss", 0) == 200


def test_single_packet_over_line():
    topo = line_topology(3, delay=0.010, bandwidth=1e6)
    net = network(topo)
    sink = Sink(net)
    net.send_path(pkt(size=1000), 0, [1, 2], sink)
    net.run(1.0)
    t, q = sink.arrivals[0]
    assert t == pytest.approx(O.LINE_SINGLE_PACKET_DELAY, abs=1e-12)
    assert math.isclose(q.total_delay, t, abs_tol=1e-9)


def test_fifo_port_never_reorders_and_charges_queuing():
    topo = line_topology(2, delay=0.001, bandwidth=1e6)
    net = network(topo)
    sink = Sink(net)
    for i in range(20):
        net.transmit(1, 0, pkt(seq=i), sink)
    net.run(1.0)
    seqs = [p.seq for _, p in sink.arrivals]
    assert seqs == list(range(20))
    for t, p in sink.arrivals:
        assert p.delay_breakdown["queuing"] == pytest.approx(p.seq * 0.008)
        assert math.isclose(p.total_delay, t - p.created_at, abs_tol=1e-9)


def test_unknown_link_rejected():
    net = network(line_topology(2))
    with pytest.raises(UnknownTarget):
        net.transmit(7, 0, pkt(), Sink(net))


# -- queues ---------------------------------------------------------------


def test_queue_empty_accepts():
    q = Queue("fifo", 10_000)
    assert q.enqueue(pkt(), 0.0)
    p = q.dequeue(0.0)
    assert p.delay_breakdown["queuing"] == 0.0


def test_fifo_tail_drop():
    q = Queue("fifo", 3000)
    for i in range(3):
        assert q.enqueue(pkt(seq=i), 0.0)
    assert not q.enqueue(pkt(seq=9), 0.0)
    assert q.drops == 1
    assert [q.dequeue(0.0).seq for _ in range(3)] == [0, 1, 2]


def test_strict_priority_eviction_matches_hand_simulation():
    q = Queue("strict_priority", 3000)
    names = {}
    for i, name in enumerate("abc"):
        p = pkt(seq=i, prio=3)
        names[i] = name
        assert q.enqueue(p, 0.0)
    x = pkt(seq=99, prio=0)
    names[99] = "x"
    evicted = []
    q.on_drop = lambda p, reason: evicted.append(names[p.seq])
    assert q.enqueue(x, 0.0)
    assert evicted == [O.PRIORITY_EVICTION_VICTIM]
    order = [names[q.dequeue(0.0).seq] for _ in range(3)]
    assert order == O.PRIORITY_EVICTION_ORDER
    assert q.occupancy_bytes == 0


def test_strict_priority_rejects_low_arrival_when_full():
    q = Queue("strict_priority", 2000)
    q.enqueue(pkt(seq=0, prio=0), 0.0)
    q.enqueue(pkt(seq=1, prio=0), 0.0)
    assert not q.enqueue(pkt(seq=2, prio=5), 0.0)


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(100, 900)), max_size=40),
       st.sampled_from(["fifo", "strict_priority"]))
def test_queue_occupancy_never_exceeds_capacity(arrivals, discipline):
    q = Queue(discipline, 3000)
    last = {}
    for i, (prio, size) in enumerate(arrivals):
        q.enqueue(pkt(seq=i, prio=prio, size=size + 40), 0.0)
        assert q.occupancy_bytes <= q.capacity_bytes
    out = []
    while (p := q.dequeue(0.0)) is not None:
        out.append(p)
    for p in out:  # within a class, FIFO order
        prio = p.priority
        assert last.get(prio, -1) < p.seq
        last[prio] = p.seq


# -- failures -------------------------------------------------------------


def test_bridge_failure_loses_packets_until_recovery():
    topo = line_topology(3, delay=0.001)
    net = network(topo)
    sink = Sink(net)
    for i in range(100):
        p = pkt(seq=i)
        net.record_sent(p)
        net.sim.schedule(i * 0.01, net.send_path, p, 0, [1, 2], sink)
    net.inject_failure("link:2", 0.3, 0.2)
    rep = net.run(2.0)
    c = rep.flows["1"]["counters"]
    assert c["dropped_failure"] > 0
    got = {p.seq for _, p in sink.arrivals}
    assert all(s in got for s in range(60, 100))
    assert c["delivered"] + c["dropped_failure"] == 100
    assert [e["event"] for e in rep.events] == ["down", "up"]


def test_zero_duration_failure_has_no_effect():
    topo = line_topology(2)
    net = network(topo)
    sink = Sink(net)
    net.inject_failure("link:1", 0.0, 0.0)
    net.transmit(1, 0, pkt(), sink)
    rep = net.run(1.0)
    assert len(sink.arrivals) == 1
    assert rep.events == []


def test_unknown_failure_target():
    net = network(line_topology(2))
    with pytest.raises(UnknownTarget):
        net.inject_failure("pop:42", 0.0, 1.0)


def test_failure_notifies_listeners():
    net = network(line_topology(2))
    seen = []
    net.failure_listeners.append(lambda kind, ident, up: seen.append((kind, ident, up)))
    net.inject_failure(("pop", 1), 0.1, 0.1)
    net.run(1.0)
    assert seen == [("pop", 1, False), ("pop", 1, True)]


# -- reports --------------------------------------------------------------


def test_empty_run_empty_report():
    rep = network(line_topology(2)).run(1.0)
    assert rep.flows == {} and rep.links == {} and rep.recoveries == []


def _lossy_run(seed):
    topo = line_topology(3, delay=0.002, loss=0.2)
    net = network(topo, seed=seed)
    sink = Sink(net)
    for i in range(300):
        p = pkt(seq=i)
        net.record_sent(p)
        net.sim.schedule(i * 1e-3, net.send_path, p, 0, [1, 2], sink)
    return net.run(1.0)


def test_same_seed_byte_identical_report():
    assert _lossy_run(4).to_json() == _lossy_run(4).to_json()
    assert _lossy_run(4).to_json() != _lossy_run(5).to_json()


def test_packet_accounting_balances():
    rep = _lossy_run(8)
    f = rep.flows["1"]
    c = f["counters"]
    assert f["in_flight"] == 0
    assert c["sent"] == c["delivered"] + c["dropped_loss"]
