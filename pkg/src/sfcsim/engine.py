"""Deterministic discrete-event kernel.

The kernel models five delay sources per packet: propagation and
transmission on links, queuing at ports and function hosts, processing at
function hosts, and retransmission (charged by the transport layer). Time is
a float in seconds; ties are broken by scheduling order.
"""

from __future__ import annotations

import bisect
import heapq
import json
import logging
import math
import zlib
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import PastEvent, UnknownTarget
from .errors import NoPath
from .model import (
    DELAY_COMPONENTS,
    DEFAULT_QUEUE_BYTES,
    Packet,
    PacketKind,
    PhysicalTopology,
    shortest_path,
)

logger = logging.getLogger(__name__)

INF = math.inf


class Event:
    __slots__ = ("time", "seq", "fn", "args", "cancelled")

    def __init__(self, time, seq, fn, args):
        self.time = time
        self.seq = seq
        self.fn = fn
        self.args = args
        self.cancelled = False

    def __lt__(self, other):
        return (self.time, self.seq) < (other.time, other.seq)

    def __repr__(self):
        name = getattr(self.fn, "__qualname__", repr(self.fn))
        return f"Event(t={self.time!r}, seq={self.seq}, {name})"


class Simulator:
    """Event heap plus named random substreams."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.now = 0.0
        self._heap: list[Event] = []
        self._seq = 0
        self._rngs: dict[str, np.random.Generator] = {}
        self.executed = 0

    def schedule(self, time: float, fn: Callable, *args) -> Event:
        if time < self.now:
            raise PastEvent(f"event at {time} is before now={self.now}")
        ev = Event(time, self._seq, fn, args)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def after(self, delay: float, fn: Callable, *args) -> Event:
        return self.schedule(self.now + delay, fn, *args)

    @staticmethod
    def cancel(ev: Event | None) -> None:
        if ev is not None:
            ev.cancelled = True

    def run(self, until: float = INF) -> None:
        heap = self._heap
        while heap and heap[0].time <= until:
            ev = heapq.heappop(heap)
            if ev.cancelled:
                continue
            self.now = ev.time
            self.executed += 1
            ev.fn(*ev.args)
        if until != INF and until > self.now:
            self.now = until

    @property
    def pending(self) -> int:
        return sum(1 for ev in self._heap if not ev.cancelled)

    def rng(self, name: str) -> np.random.Generator:
        """Independent stream keyed by ``name``; stable across runs and hosts."""
        gen = self._rngs.get(name)
        if gen is None:
            key = zlib.crc32(name.encode())
            gen = np.random.default_rng(np.random.SeedSequence([self.seed, key]))
            self._rngs[name] = gen
        return gen


# ---------------------------------------------------------------------------
# Queues


class Queue:
    """Byte-bounded queue, FIFO or strict priority (0 is highest).

    Under strict priority a full queue evicts its lowest-priority, most
    recently queued packets to admit an arrival that outranks them.
    """

    def __init__(self, discipline: str = "fifo", capacity_bytes: float = DEFAULT_QUEUE_BYTES,
                 on_drop: Callable[[Packet, str], None] | None = None):
        if discipline not in ("fifo", "strict_priority"):
            raise ValueError(f"unknown queue discipline {discipline!r}")
        self.discipline = discipline
        self.capacity_bytes = capacity_bytes
        self.occupancy_bytes = 0
        self.drops = 0
        self.evictions = 0
        self.on_drop = on_drop
        self._fifo: deque = deque()
        self._classes: dict[int, deque] = {}
        self._active: list[int] = []

    def __len__(self):
        if self.discipline == "fifo":
            return len(self._fifo)
        return sum(len(q) for q in self._classes.values())

    def _push(self, entry, prio):
        if self.discipline == "fifo":
            self._fifo.append(entry)
            return
        q = self._classes.get(prio)
        if q is None:
            q = self._classes[prio] = deque()
        if not q:
            bisect.insort(self._active, prio)
        q.append(entry)

    def _pop_class(self, prio, tail=False):
        q = self._classes[prio]
        entry = q.pop() if tail else q.popleft()
        if not q:
            self._active.remove(prio)
        return entry

    def enqueue(self, p: Packet, now: float) -> bool:
        size = p.size
        if self.occupancy_bytes + size <= self.capacity_bytes:
            self._push((p, now, size), p.priority if self.discipline != "fifo" else 0)
            self.occupancy_bytes += size
            return True
        if self.discipline == "strict_priority":
            prio = p.priority
            evictable = sum(
                e[2] for c in self._active if c > prio for e in self._classes[c]
            )
            if self.occupancy_bytes - evictable + size <= self.capacity_bytes:
                while self.occupancy_bytes + size > self.capacity_bytes:
                    victim, _, vsize = self._pop_class(self._active[-1], tail=True)
                    self.occupancy_bytes -= vsize
                    self.evictions += 1
                    self.drops += 1
                    if self.on_drop:
                        self.on_drop(victim, "queue")
                self._push((p, now, size), prio)
                self.occupancy_bytes += size
                return True
        self.drops += 1
        return False

    def dequeue(self, now: float) -> Packet | None:
        if self.discipline == "fifo":
            if not self._fifo:
                return None
            p, t, size = self._fifo.popleft()
        else:
            if not self._active:
                return None
            p, t, size = self._pop_class(self._active[0])
        self.occupancy_bytes -= size
        p.delay_breakdown["queuing"] += now - t
        return p

    def clear(self) -> list[Packet]:
        out = [e[0] for e in self._fifo]
        for prio in list(self._active):
            out.extend(e[0] for e in self._classes[prio])
        self._fifo.clear()
        self._classes.clear()
        self._active.clear()
        self.occupancy_bytes = 0
        return out


# ---------------------------------------------------------------------------
# Network


def is_control(p: Packet) -> bool:
    """Transport and management packets are accounted apart from data flows."""
    return p.kind == PacketKind.SIGNALING or p.flow_id == 0


class Port:
    """One direction of a link: output queue plus serializer."""

    __slots__ = ("net", "link", "src", "dst", "queue", "busy_until", "service_ev",
                 "epoch", "tx_bytes", "tx_packets")

    def __init__(self, net: Network, link, src: int, discipline: str):
        self.net = net
        self.link = link
        self.src = src
        self.dst = link.other(src)
        self.queue = Queue(discipline, link.queue_bytes, on_drop=net._queue_drop)
        self.busy_until = 0.0
        self.service_ev = None
        self.epoch = 0
        self.tx_bytes = 0
        self.tx_packets = 0

    def send(self, p: Packet, on_arrival: Callable) -> None:
        net = self.net
        now = net.sim.now
        if not self.link.up or not net.topo.pops[self.src].up:
            net.drop(p, "failure")
            return
        if now >= self.busy_until and not len(self.queue):
            self._start(p, on_arrival, now)
            return
        p_entry = _Pending(p, on_arrival)
        if not self.queue.enqueue(p_entry, now):
            net.drop(p, "queue")
            return
        if self.service_ev is None:
            self.service_ev = net.sim.schedule(self.busy_until, self._service)

    def _service(self):
        self.service_ev = None
        now = self.net.sim.now
        entry = self.queue.dequeue(now)
        if entry is None:
            return
        self._start(entry.packet, entry.on_arrival, now)
        if len(self.queue):
            self.service_ev = self.net.sim.schedule(self.busy_until, self._service)

    def _start(self, p: Packet, on_arrival: Callable, now: float) -> None:
        net = self.net
        link = self.link
        size = p.size
        tx = size * 8.0 / link.bandwidth
        self.busy_until = now + tx
        self.tx_bytes += size
        self.tx_packets += 1
        bd = p.delay_breakdown
        bd["transmission"] += tx
        if net._forced_drop(link.id, p):
            net.drop(p, "loss")
            return
        if link.loss_probability > 0.0:
            if link.loss_probability >= 1.0 or net.loss_rng(link.id).random() < link.loss_probability:
                net.drop(p, "loss")
                return
        bd["propagation"] += link.propagation_delay
        net.sim.schedule(self.busy_until + link.propagation_delay, self._arrive, p,
                         on_arrival, self.epoch)

    def _arrive(self, p: Packet, on_arrival: Callable, epoch: int) -> None:
        if epoch != self.epoch or not self.link.up or not self.net.topo.pops[self.dst].up:
            self.net.drop(p, "failure")
            return
        on_arrival(p)

    def fail(self):
        self.epoch += 1
        self.net.sim.cancel(self.service_ev)
        self.service_ev = None
        self.busy_until = 0.0
        for entry in self.queue.clear():
            self.net.drop(entry.packet, "failure")


class _Pending:
    """Queue entry wrapper so the queue sees packet size and priority."""

    __slots__ = ("packet", "on_arrival")

    def __init__(self, packet, on_arrival):
        self.packet = packet
        self.on_arrival = on_arrival

    @property
    def size(self):
        return self.packet.size

    @property
    def priority(self):
        return self.packet.priority

    @property
    def delay_breakdown(self):
        return self.packet.delay_breakdown


@dataclass
class DeliveryRecord:
    flow_id: int
    seq: int
    destination: int
    time: float
    created_at: float
    payload_bytes: int
    breakdown: dict
    retransmitted: bool = False
    tlvs: list = field(default_factory=list, repr=False)

    @property
    def delay(self) -> float:
        return self.time - self.created_at


class Network:
    """Substrate state during a run: ports, hosts, counters and failures."""

    def __init__(self, sim: Simulator, topo: PhysicalTopology, queue_discipline: str = "fifo"):
        self.sim = sim
        self.topo = topo
        self.ports: dict[tuple[int, int], Port] = {}
        for link in topo.links.values():
            self.ports[(link.id, link.a)] = Port(self, link, link.a, queue_discipline)
            self.ports[(link.id, link.b)] = Port(self, link, link.b, queue_discipline)
        self.counters: dict[int, Counter] = defaultdict(Counter)
        self.control_counters: Counter = Counter()
        self.deliveries: dict[tuple[int, int], list[DeliveryRecord]] = defaultdict(list)
        self._delivered_seqs: dict[tuple[int, int], set] = defaultdict(set)
        self._drop_plan: dict[tuple[int, int, int], int] = {}
        self.hosts: dict[str, object] = {}
        self.failure_listeners: list[Callable] = []
        self.drop_listeners: list[Callable] = []
        self.recovery_log: list[dict] = []
        self.event_log: list[dict] = []
        self.sent_at: dict[int, dict] = defaultdict(dict)
        self.agents: dict[int, object] = {}
        # (flow, destination, seq) -> (retransmitting host, first emission, retransmission time)
        self.retx_info: dict[tuple, tuple] = {}
        self._loss_rngs: dict[int, np.random.Generator] = {}

    # -- accounting -------------------------------------------------------
    def count(self, p: Packet, key: str, n: int = 1) -> None:
        if is_control(p):
            self.control_counters[key] += n
        else:
            self.counters[p.flow_id][key] += n

    def drop(self, p: Packet, reason: str) -> None:
        self.count(p, f"dropped_{reason}")
        for fn in self.drop_listeners:
            fn(p, reason)

    def _queue_drop(self, entry, reason):
        self.drop(getattr(entry, "packet", entry), reason)

    def record_sent(self, p: Packet) -> None:
        self.count(p, "sent")
        self.sent_at[p.flow_id][p.seq] = self.sim.now

    def deliver(self, p: Packet, destination: int, retransmitted: bool = False) -> bool:
        """Record arrival at an application sink; duplicates are absorbed."""
        key = (p.flow_id, destination)
        seen = self._delivered_seqs[key]
        if p.seq in seen:
            self.count(p, "duplicate")
            return False
        seen.add(p.seq)
        self.count(p, "delivered")
        self.deliveries[key].append(
            DeliveryRecord(p.flow_id, p.seq, destination, self.sim.now, p.created_at,
                           p.payload_bytes, dict(p.delay_breakdown), retransmitted,
                           list(p.tlvs))
        )
        return True

    def drop_once(self, link_id: int, flow_id: int, seq: int, count: int = 1) -> None:
        """Deterministically lose the next ``count`` transmissions of a packet."""
        if link_id not in self.topo.links:
            raise UnknownTarget(f"link {link_id}")
        self._drop_plan[(link_id, flow_id, seq)] = count

    def _forced_drop(self, link_id: int, p: Packet) -> bool:
        if not self._drop_plan:
            return False
        key = (link_id, p.flow_id, p.seq)
        left = self._drop_plan.get(key)
        if not left or is_control(p):
            return False
        if left == 1:
            del self._drop_plan[key]
        else:
            self._drop_plan[key] = left - 1
        return True

    # -- forwarding -------------------------------------------------------
    def transmit(self, link_id: int, src_pop: int, p: Packet, on_arrival: Callable) -> None:
        try:
            port = self.ports[(link_id, src_pop)]
        except KeyError:
            raise UnknownTarget(f"link {link_id} from POP {src_pop}") from None
        port.send(p, on_arrival)

    def send_path(self, p: Packet, src_pop: int, path: list[int], on_arrival: Callable) -> None:
        """Store-and-forward ``p`` along ``path``; call ``on_arrival`` at the end."""
        if not path:
            if not self.topo.pops[src_pop].up:
                self.drop(p, "failure")
                return
            on_arrival(p)
            return
        self._hop(p, src_pop, path, 0, on_arrival)

    def _hop(self, p, pop, path, i, on_arrival):
        link_id = path[i]
        port = self.ports.get((link_id, pop))
        if port is None:
            raise UnknownTarget(f"link {link_id} does not touch POP {pop}")
        if i + 1 == len(path):
            port.send(p, on_arrival)
        else:
            nxt = port.dst
            port.send(p, lambda q: self._hop(q, nxt, path, i + 1, on_arrival))

    def send_to(self, p: Packet, src_pop: int, node, path: list[int] | None = None) -> None:
        if path is None:
            try:
                path = shortest_path(self.topo, src_pop, node.pop)
            except NoPath:
                self.drop(p, "failure")
                return
        self.send_path(p, src_pop, path, node.receive)

    # -- failures ---------------------------------------------------------
    def _resolve(self, target):
        if isinstance(target, str):
            kind, _, ident = target.partition(":")
            target = (kind, int(ident)) if ident else (kind, None)
        kind, ident = target
        if kind == "link" and ident in self.topo.links:
            return kind, ident
        if kind == "pop" and ident in self.topo.pops:
            return kind, ident
        raise UnknownTarget(f"unknown failure target {target!r}")

    def inject_failure(self, target, at: float, duration: float) -> None:
        kind, ident = self._resolve(target)
        if at < self.sim.now:
            raise PastEvent(f"failure at {at} is before now={self.sim.now}")
        if duration < 0:
            raise ValueError("negative failure duration")
        if duration == 0:
            return
        self.sim.schedule(at, self._set_state, kind, ident, False)
        if duration != INF:
            self.sim.schedule(at + duration, self._set_state, kind, ident, True)

    def _set_state(self, kind: str, ident: int, up: bool) -> None:
        now = self.sim.now
        if kind == "link":
            link = self.topo.links[ident]
            if link.up == up:
                return
            link.up = up
            if not up:
                self.ports[(ident, link.a)].fail()
                self.ports[(ident, link.b)].fail()
        else:
            pop = self.topo.pops[ident]
            if pop.up == up:
                return
            pop.up = up
            if not up:
                for lid in self.topo.incident(ident):
                    self.ports[(lid, ident)].fail()
                for host in list(self.hosts.values()):
                    if getattr(host, "pop", None) == ident and hasattr(host, "fail"):
                        host.fail()
        self.event_log.append({"time": now, "event": "up" if up else "down",
                               "target": f"{kind}:{ident}"})
        for fn in self.failure_listeners:
            fn(kind, ident, up)

    def loss_rng(self, link_id: int) -> np.random.Generator:
        gen = self._loss_rngs.get(link_id)
        if gen is None:
            gen = self._loss_rngs[link_id] = self.sim.rng(f"link:{link_id}")
        return gen

    def register_agent(self, agent) -> int:
        """Give a transport agent a network-wide id (1-based, in creation order)."""
        ident = len(self.agents) + 1
        self.agents[ident] = agent
        return ident

    def note_recovery(self, p: Packet, destination: int) -> None:
        """Log a delivered packet that some agent had to retransmit."""
        info = self.retx_info.pop((p.flow_id, destination, p.seq), None)
        if info is None:
            return
        by, first_emit, retx_at = info
        now = self.sim.now
        self.recovery_log.append({
            "flow": p.flow_id, "seq": p.seq, "destination": destination, "by": by,
            "lost_emitted_at": first_emit, "retransmitted_at": retx_at,
            "delivered_at": now, "recovery_delay": now - first_emit,
            "retransmission_delay": p.delay_breakdown["retransmission"],
        })

    # -- hosts ------------------------------------------------------------
    def register(self, host) -> None:
        if host.name in self.hosts:
            raise ValueError(f"duplicate host name {host.name!r}")
        self.hosts[host.name] = host

    def unregister(self, host) -> None:
        self.hosts.pop(host.name, None)

    # -- reporting --------------------------------------------------------
    def run(self, until: float) -> SimulationReport:
        self.sim.run(until)
        return SimulationReport.build(self, until)


class FunctionHost:
    """Runs one network function instance on a POP.

    Packets wait in ``queue`` (queuing delay), are served one at a time for
    ``processing_delay`` seconds (processing delay), and the server is held
    for ``max(processing_delay, 1 / capacity)`` so throughput never exceeds
    ``capacity`` packets per second. The function object sees each packet at
    service completion and returns the packets to emit.
    """

    def __init__(self, net: Network, name: str, pop: int, function,
                 processing_delay: float = 0.0, capacity: float = INF,
                 queue_bytes: float = 10 * DEFAULT_QUEUE_BYTES, discipline: str = "fifo",
                 app=None):
        self.net = net
        self.sim = net.sim
        self.name = name
        self.pop = pop
        self.function = function
        self.processing_delay = processing_delay
        self.capacity = capacity
        self.service_time = max(processing_delay, 1.0 / capacity if capacity else INF)
        self.queue = Queue(discipline, queue_bytes, on_drop=net._queue_drop)
        self.app = app
        self.busy = False
        self.alive = True
        self.gate: Callable[[Packet], bool] | None = None
        self.forward: Callable[[FunctionHost, Packet], None] | None = None
        self.arrivals = 0
        self.processed = 0
        self.first_processed_at: float | None = None
        self.last_processed_at: float | None = None
        net.register(self)
        if hasattr(function, "attach"):
            function.attach(self)

    @property
    def now(self) -> float:
        return self.sim.now

    def after(self, delay: float, fn: Callable, *args):
        return self.sim.after(delay, self._guarded, fn, args)

    def _guarded(self, fn, args):
        if self.alive:
            fn(*args)

    def receive(self, p: Packet) -> None:
        net = self.net
        if not self.alive or not net.topo.pops[self.pop].up:
            net.drop(p, "failure")
            return
        if is_control(p) and hasattr(self.function, "on_control"):
            self.function.on_control(p)
            return
        if self.gate is not None and not self.gate(p):
            net.drop(p, "inactive")
            return
        self.arrivals += 1
        if not self.busy:
            self._serve(p)
        elif not self.queue.enqueue(p, self.sim.now):
            net.drop(p, "queue")

    def _serve(self, p: Packet) -> None:
        d = self.processing_delay
        p.delay_breakdown["processing"] += d
        if self.service_time == 0.0:
            self._complete(p)
            return
        self.busy = True
        if d > 0.0:
            self.sim.after(d, self._complete_guarded, p)
        else:
            self._complete(p)
        self.sim.after(self.service_time, self._free)

    def _complete_guarded(self, p):
        if self.alive:
            self._complete(p)
        else:
            self.net.drop(p, "failure")

    def _complete(self, p: Packet) -> None:
        now = self.sim.now
        self.processed += 1
        if self.first_processed_at is None:
            self.first_processed_at = now
        self.last_processed_at = now
        for out in self.function.process(p, self):
            self.emit(out)

    def _free(self):
        if not self.alive:
            return
        self.busy = False
        nxt = self.queue.dequeue(self.sim.now)
        if nxt is not None:
            self._serve(nxt)

    def emit(self, p: Packet) -> None:
        if self.forward is None:
            self.net.drop(p, "unrouted")
            return
        self.forward(self, p)

    def fail(self) -> None:
        self.alive = False
        for p in self.queue.clear():
            self.net.drop(p, "failure")

    @property
    def idle(self) -> bool:
        return not self.busy and not len(self.queue)


# ---------------------------------------------------------------------------
# Reports


def _summary(values) -> dict:
    if not values:
        return {"count": 0}
    arr = np.asarray(values, dtype=float)
    return {
        "count": int(arr.size),
        "mean": float(arr.mean()),
        "min": float(arr.min()),
        "p50": float(np.percentile(arr, 50)),
        "p95": float(np.percentile(arr, 95)),
        "p99": float(np.percentile(arr, 99)),
        "max": float(arr.max()),
    }


@dataclass
class SimulationReport:
    """Per-flow delivery statistics, delay decomposition and drop counters."""

    until: float
    flows: dict = field(default_factory=dict)
    links: dict = field(default_factory=dict)
    hosts: dict = field(default_factory=dict)
    control: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    recoveries: list = field(default_factory=list)

    @classmethod
    def build(cls, net: Network, until: float) -> SimulationReport:
        flows = {}
        dests_by_flow = defaultdict(list)
        for (flow, dest), recs in net.deliveries.items():
            dests_by_flow[flow].append(dest)
        for flow in sorted(set(net.counters) | set(dests_by_flow)):
            c = net.counters[flow]
            sent = c.get("sent", 0)
            per_dest = {}
            for dest in sorted(dests_by_flow[flow]):
                recs = net.deliveries[(flow, dest)]
                delays = [r.delay for r in recs]
                comp = {k: math.fsum(r.breakdown[k] for r in recs) / len(recs)
                        for k in DELAY_COMPONENTS} if recs else {}
                ooo = 0
                highest = -1
                for r in recs:
                    if r.seq < highest:
                        ooo += 1
                    else:
                        highest = r.seq
                span = (recs[-1].time - recs[0].time) if len(recs) > 1 else 0.0
                payload = sum(r.payload_bytes for r in recs)
                per_dest[str(dest)] = {
                    "delivered": len(recs),
                    "loss_ratio": (1.0 - len(recs) / sent) if sent else 0.0,
                    "delay": _summary(delays),
                    "delay_components_mean": comp,
                    "out_of_order": ooo,
                    "payload_bytes": payload,
                    "goodput_bps": payload * 8.0 / span if span > 0 else 0.0,
                }
            created = sent + c.get("replicated", 0) + c.get("retransmitted", 0)
            terminated = sum(v for k, v in c.items()
                             if k.startswith("dropped_") or k in ("delivered", "duplicate",
                                                                   "eliminated", "absorbed"))
            recs = [r for r in net.recovery_log if r["flow"] == flow]
            flows[str(flow)] = {
                "counters": dict(sorted(c.items())),
                "in_flight": created - terminated,
                "destinations": per_dest,
                "recovery_delay": _summary([r["recovery_delay"] for r in recs]),
            }
        links = {}
        for (lid, src), port in sorted(net.ports.items()):
            if port.tx_packets:
                links[f"{lid}:{src}->{port.dst}"] = {
                    "tx_packets": port.tx_packets,
                    "tx_bytes": port.tx_bytes,
                    "queue_drops": port.queue.drops,
                }
        hosts = {
            name: {"pop": h.pop, "arrivals": h.arrivals, "processed": h.processed}
            for name, h in sorted(net.hosts.items())
            if isinstance(h, FunctionHost)
        }
        return cls(until, flows, links, hosts, dict(sorted(net.control_counters.items())),
                   list(net.event_log), [dict(r) for r in net.recovery_log])

    def to_dict(self) -> dict:
        return {
            "until": self.until,
            "flows": self.flows,
            "links": self.links,
            "hosts": self.hosts,
            "control": self.control,
            "events": self.events,
            "recoveries": self.recoveries,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)
