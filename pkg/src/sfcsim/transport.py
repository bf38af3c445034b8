"""Segment-level reliable transport.

A *segment* joins two transport-aware nodes: a sender agent (a source
endpoint or a Transport Assistant) and whichever agent next receives the
packets bound for one destination endpoint. Each segment runs its own
Reno-style window with cumulative plus selective acknowledgements, caches
packets that ask for reliability, and repairs losses from that cache. When
the cache no longer holds a packet the loss is escalated upstream with a
NACK.

With only the two endpoints acting as agents this is the end-to-end
baseline; a Transport Assistant in between splits the path into two
shorter control loops.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict, deque
from dataclasses import dataclass, field

from .model import (
    Packet,
    PacketKind,
    TlvKind,
    make_tlv,
    shortest_path,
    tlv_values,
)
from .errors import NoPath
from .netfuncs import NetworkFunction

logger = logging.getLogger(__name__)

DUP_ACK_THRESHOLD = 3
MAX_SACK_BLOCKS = 8


# ---------------------------------------------------------------------------
# Cache


@dataclass
class CacheEntry:
    packet: Packet
    emitted_at: float
    priority: int
    size: int


class PacketCache:
    """Byte-bounded store of packets awaiting acknowledgement.

    When full, the oldest entry of the lowest priority class that does not
    outrank the newcomer is evicted; a newcomer that outranks nothing is
    simply not cached.
    """

    def __init__(self, budget_bytes: float = math.inf):
        self.budget_bytes = budget_bytes
        self.bytes = 0
        self.evictions = 0
        self.rejected = 0
        self._entries: OrderedDict = OrderedDict()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries

    def get(self, key) -> CacheEntry | None:
        entry = self._entries.get(key)
        if entry is not None:
            self._entries.move_to_end(key)
        return entry

    def put(self, key, packet: Packet, emitted_at: float) -> bool:
        if key in self._entries:
            self.discard(key)
        size = packet.size
        prio = packet.priority
        while self.bytes + size > self.budget_bytes:
            victim = None
            for k, e in self._entries.items():
                if e.priority >= prio and (victim is None or e.priority > victim[1].priority):
                    victim = (k, e)
            if victim is None:
                self.rejected += 1
                return False
            self.discard(victim[0])
            self.evictions += 1
        self._entries[key] = CacheEntry(packet, emitted_at, prio, size)
        self.bytes += size
        return True

    def discard(self, key) -> None:
        entry = self._entries.pop(key, None)
        if entry is not None:
            self.bytes -= entry.size


# ---------------------------------------------------------------------------
# Window state


@dataclass
class Outstanding:
    seg: int
    flow: int
    seq: int
    dest: int
    sent_at: float
    first_sent_at: float
    created_at: float
    reliability: object
    upstream: tuple | None = None
    retransmitted: bool = False
    sacked: bool = False
    lost: bool = False
    awaiting: bool = False

    @property
    def key(self):
        return (self.flow, self.dest, self.seq)


@dataclass
class RenoState:
    """Window, RTT estimator and loss recovery for one segment.

    Slow start adds one packet per acknowledgement that advances the
    cumulative point, so the window doubles per round trip; congestion
    avoidance adds one packet per window's worth of such acknowledgements.
    Three duplicate acknowledgements halve the window; a timeout sets the
    threshold to half the window and restarts from one packet.
    """

    cwnd: int = 1
    ssthresh: int = 64
    rto: float = 0.25
    rto_min: float = 0.0
    rto_max: float = 60.0
    srtt: float | None = None
    rttvar: float = 0.0
    ack_count: int = 0
    dup_acks: int = 0
    recover: int | None = None
    recover_kind: str | None = None
    snd_una: int = 0
    snd_nxt: int = 0
    outstanding: dict = field(default_factory=dict)
    round_end: int | None = None
    cwnd_history: list = field(default_factory=list)
    loss_events: list = field(default_factory=list)
    rtt_samples: int = 0

    def __post_init__(self):
        if not self.cwnd_history:
            self.cwnd_history.append(self.cwnd)

    @property
    def pipe(self) -> int:
        return sum(1 for o in self.outstanding.values() if not (o.sacked or o.lost))

    def can_send(self) -> bool:
        return self.pipe < self.cwnd

    def rtt_sample(self, r: float) -> None:
        if self.srtt is None:
            self.srtt = r
            self.rttvar = r / 2
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - r)
            self.srtt = 0.875 * self.srtt + 0.125 * r
        self.rtt_samples += 1
        self.rto = min(self.rto_max, max(self.rto_min, self.srtt + 4 * self.rttvar))

    def _grow(self) -> None:
        if self.cwnd < self.ssthresh:
            self.cwnd += 1
        else:
            self.ack_count += 1
            if self.ack_count >= self.cwnd:
                self.cwnd += 1
                self.ack_count = 0

    def on_ack(self, cum: int, echo: int, sacks, now: float):
        """Apply one acknowledgement.

        Returns the entries newly acknowledged and the segment to fast
        retransmit (or None).
        """
        newly = []
        if sacks:
            for o in self.outstanding.values():
                if not o.sacked and any(a <= o.seg < b for a, b in sacks):
                    o.sacked = True
                    newly.append(o)
        advanced = cum > self.snd_una
        if advanced:
            for s in range(self.snd_una, cum):
                o = self.outstanding.pop(s, None)
                if o is not None and not o.sacked:
                    newly.append(o)
            self.snd_una = cum
        for o in newly:
            if o.seg == echo and not o.retransmitted:
                self.rtt_sample(now - o.sent_at)
                break
        fast = None
        if advanced:
            self.dup_acks = 0
            if self.recover is not None and cum >= self.recover:
                if self.recover_kind == "fast":
                    self.cwnd = max(1, self.ssthresh)
                self.recover = self.recover_kind = None
            elif self.recover is not None and self.recover_kind == "fast":
                # partial acknowledgement: the next hole is lost too
                nxt = self.outstanding.get(self.snd_una)
                if nxt is not None and not nxt.sacked:
                    fast = self.snd_una
            else:
                self._grow()
        elif self.outstanding and cum == self.snd_una:
            self.dup_acks += 1
            if self.dup_acks == DUP_ACK_THRESHOLD and self.recover is None:
                before = self.cwnd
                self.ssthresh = max(1, self.cwnd // 2)
                self.cwnd = self.ssthresh
                self.ack_count = 0
                self.recover = self.snd_nxt
                self.recover_kind = "fast"
                self.loss_events.append(
                    {"time": now, "kind": "dup_ack", "segment": self.snd_una,
                     "cwnd_before": before, "cwnd_after": self.cwnd}
                )
                fast = self.snd_una
        return newly, fast

    def on_timeout(self, now: float) -> list[int]:
        """Collapse the window; every unacknowledged segment counts as lost."""
        before = self.cwnd
        self.ssthresh = max(1, self.cwnd // 2)
        self.cwnd = 1
        self.ack_count = 0
        self.dup_acks = 0
        self.recover = self.snd_nxt
        self.recover_kind = "timeout"
        rto_used = self.rto
        self.rto = min(self.rto_max, self.rto * 2)
        lost = []
        for s in sorted(self.outstanding):
            o = self.outstanding[s]
            if not o.sacked:
                o.lost = True
                lost.append(s)
        self.loss_events.append(
            {"time": now, "kind": "timeout", "segment": self.snd_una,
             "cwnd_before": before, "cwnd_after": 1, "rto": rto_used}
        )
        return lost


class ReceiverState:
    """Which segments of one (sender, destination) pair have arrived."""

    def __init__(self):
        self.cum = 0
        self.above: set[int] = set()

    def accept(self, seg: int) -> bool:
        if seg < self.cum or seg in self.above:
            return False
        self.above.add(seg)
        while self.cum in self.above:
            self.above.discard(self.cum)
            self.cum += 1
        return True

    def sack_blocks(self) -> list[tuple[int, int]]:
        blocks = []
        for s in sorted(self.above):
            if blocks and blocks[-1][1] == s:
                blocks[-1] = (blocks[-1][0], s + 1)
            else:
                blocks.append((s, s + 1))
        return blocks[:MAX_SACK_BLOCKS]


# ---------------------------------------------------------------------------
# Agent


class _Segment:
    def __init__(self, dest: int, state: RenoState):
        self.dest = dest
        self.state = state
        self.queues: dict[int, deque] = {}
        self.weights: dict[int, int] = {}
        self.current: dict[int, int] = {}
        self.retx: deque = deque()
        self.refills: deque = deque()
        self.skipped: set[int] = set()
        self.timer = None
        self.receiver_id: int | None = None

    def next_packet(self):
        """Smooth weighted round-robin across flows with queued packets."""
        active = [f for f in sorted(self.queues) if self.queues[f]]
        if not active:
            return None
        total = 0
        best = None
        for f in active:
            w = self.weights.get(f, 1)
            total += w
            self.current[f] = self.current.get(f, 0) + w
            if best is None or self.current[f] > self.current[best]:
                best = f
        self.current[best] -= total
        return self.queues[best].popleft()


def wrr_weight(priority: int) -> int:
    return max(1, 8 - priority)


class TransportAgent:
    """Sender and receiver halves of the segment transport on one host.

    ``retain`` keeps acknowledged packets in the cache; sources use it so a
    downstream agent that lost its own copy can always be refilled.
    """

    def __init__(self, host, config: dict | None = None, *, retain: bool = False):
        config = dict(config or {})
        self.host = host
        self.net = host.net
        self.config = config
        self.retain = retain
        self.id = self.net.register_agent(self)
        budget = config.get("cache_bytes", math.inf if retain else 10_000_000)
        self.cache = PacketCache(budget)
        self.buffer_bytes = config.get("buffer_bytes", 1_000_000)
        self.buffered = 0
        self.segments: dict[int, _Segment] = {}
        self.receivers: dict[tuple[int, int], ReceiverState] = {}
        self.upstream_of: dict[tuple, tuple] = {}
        self.awaiting: dict[tuple, int] = {}
        self.escalations = 0

    # -- sender ------------------------------------------------------------
    def segment(self, dest: int) -> _Segment:
        seg = self.segments.get(dest)
        if seg is None:
            cfg = self.config
            state = RenoState(
                cwnd=int(cfg.get("initial_cwnd", 1)),
                ssthresh=int(cfg.get("ssthresh", 64)),
                rto=float(cfg.get("rto_initial", 0.25)),
                rto_min=float(cfg.get("rto_min", 0.0)),
            )
            seg = self.segments[dest] = _Segment(dest, state)
        return seg

    def send(self, p: Packet, dest: int, upstream: tuple | None = None) -> None:
        """Queue one single-destination packet on the segment towards ``dest``."""
        seg = self.segment(dest)
        size = p.size
        if self.buffered + size > self.buffer_bytes and not self._evict_for(p, size):
            self.net.drop(p, "queue")
            return
        q = seg.queues.setdefault(p.flow_id, deque())
        q.append((p, upstream, self.host.now))
        seg.weights[p.flow_id] = wrr_weight(p.priority)
        self.buffered += size
        self.pump(dest)

    def _evict_for(self, p: Packet, size: int) -> bool:
        """Make room by dropping newest packets of lower-priority flows."""
        prio = p.priority
        while self.buffered + size > self.buffer_bytes:
            victim = None
            for seg in self.segments.values():
                for flow, q in seg.queues.items():
                    if q and q[-1][0].priority > prio:
                        if victim is None or q[-1][0].priority > victim[-1][0].priority:
                            victim = q
            if victim is None:
                return False
            old, _, _ = victim.pop()
            self.buffered -= old.size
            self.net.drop(old, "queue")
        return True

    def pump(self, dest: int) -> None:
        seg = self.segments[dest]
        st = seg.state
        now = self.host.now
        while seg.refills:
            self._send_refill(seg, seg.refills.popleft())
        while st.pipe < st.cwnd:
            if seg.retx:
                self._retransmit(seg, seg.retx.popleft())
                continue
            item = seg.next_packet()
            if item is None:
                break
            p, upstream, queued_at = item
            self.buffered -= p.size
            p.delay_breakdown["queuing"] += now - queued_at
            self._transmit_new(seg, p, upstream)
        if st.round_end is None:
            if st.snd_nxt:
                st.round_end = st.snd_nxt
        self._arm(seg)

    def _transmit_new(self, seg: _Segment, p: Packet, upstream) -> None:
        st = seg.state
        now = self.host.now
        s = st.snd_nxt
        st.snd_nxt += 1
        rel = p.reliability
        o = Outstanding(s, p.flow_id, p.seq, seg.dest, now, now, p.created_at, rel, upstream)
        st.outstanding[s] = o
        if rel.mode != "none":
            self.cache.put(o.key, p.copy(), now)
        p.set_tlv(make_tlv(TlvKind.SEGMENT, self.id, s))
        self.host.emit(p)

    def _retransmit(self, seg: _Segment, s: int, fast: bool = False) -> None:
        st = seg.state
        o = st.outstanding.get(s)
        if o is None or o.sacked:
            return
        now = self.host.now
        if not o.reliability.wants_retransmission(now - o.created_at):
            self._abandon(seg, o)
            return
        entry = self.cache.get(o.key)
        if entry is None:
            self._escalate(seg, o)
            return
        q = entry.packet.copy()
        q.delay_breakdown["retransmission"] += now - entry.emitted_at
        q.set_tlv(make_tlv(TlvKind.SEGMENT, self.id, s))
        o.lost = False
        o.awaiting = False
        o.retransmitted = True
        o.sent_at = now
        self.net.count(q, "retransmitted")
        self.net.retx_info[o.key] = (self.host.name, o.first_sent_at, now)
        self.host.emit(q)

    def _abandon(self, seg: _Segment, o: Outstanding) -> None:
        st = seg.state
        st.outstanding.pop(o.seg, None)
        self.cache.discard(o.key)
        seg.skipped.add(o.seg)
        self.net.control_counters["skips"] += 1
        self._send_skip(seg, o.seg)

    def _send_skip(self, seg: _Segment, s: int) -> None:
        if seg.receiver_id is None:
            return
        target = self.net.agents[seg.receiver_id].host
        msg = Packet(self.host.app or _anon_app(), PacketKind.REGULAR, 0, 0, 0,
                     [make_tlv(TlvKind.SKIP, self.id, seg.dest, s)])
        self.net.count(msg, "sent")
        self.net.send_to(msg, self.host.pop, target)

    def _escalate(self, seg: _Segment, o: Outstanding) -> None:
        o.lost = True
        self.escalations += 1
        self.net.control_counters["escalations"] += 1
        self.net.event_log.append({"time": self.host.now, "event": "escalation",
                                   "target": self.host.name, "flow": o.flow, "seq": o.seq})
        o.awaiting = True
        self.awaiting[o.key] = o.seg
        self._nack_upstream(o.key, o.upstream)

    def _nack_upstream(self, key, upstream) -> None:
        if upstream is None:
            self.net.control_counters["unrecoverable"] += 1
            return
        up_agent = self.net.agents.get(upstream[0])
        if up_agent is None:
            self.net.control_counters["unrecoverable"] += 1
            return
        flow, dest, seq = key
        msg = Packet(self.host.app or _anon_app(), PacketKind.REGULAR, 0, 0, 0,
                     [make_tlv(TlvKind.NACK, self.id, flow, dest, seq)])
        self.net.count(msg, "sent")
        self.net.send_to(msg, self.host.pop, up_agent.host)

    def _send_refill(self, seg: _Segment, entry: CacheEntry) -> None:
        """Re-send a cached packet as fresh segment data for a downstream agent."""
        now = self.host.now
        q = entry.packet.copy()
        q.delay_breakdown["retransmission"] += now - entry.emitted_at
        self.net.count(q, "retransmitted")
        st = seg.state
        s = st.snd_nxt
        st.snd_nxt += 1
        o = Outstanding(s, q.flow_id, q.seq, seg.dest, now, now, q.created_at,
                        q.reliability, None, retransmitted=True)
        st.outstanding[s] = o
        q.set_tlv(make_tlv(TlvKind.SEGMENT, self.id, s))
        self.host.emit(q)

    def refill(self, p: Packet) -> bool:
        """Use an upstream refill to repair a segment waiting on it."""
        dest = p.destinations[0]
        key = (p.flow_id, dest, p.seq)
        s = self.awaiting.pop(key, None)
        if s is None:
            return False
        seg = self.segments[dest]
        o = seg.state.outstanding.get(s)
        if o is None or o.sacked:
            self.net.count(p, "absorbed")
            return True
        now = self.host.now
        self.cache.put(key, p.copy(), now)
        p.set_tlv(make_tlv(TlvKind.SEGMENT, self.id, s))
        o.lost = False
        o.awaiting = False
        o.retransmitted = True
        o.sent_at = now
        self.net.retx_info[key] = (self.host.name, o.first_sent_at, now)
        self.host.emit(p)
        self._arm(seg)
        return True

    def _arm(self, seg: _Segment) -> None:
        st = seg.state
        live = any(not o.sacked for o in st.outstanding.values()) or (
            st.snd_una in seg.skipped)
        if not live:
            self.host.sim.cancel(seg.timer)
            seg.timer = None
            return
        if seg.timer is None or seg.timer.cancelled:
            seg.timer = self.host.after(st.rto, self._on_timeout, seg.dest)

    def _restart(self, seg: _Segment) -> None:
        self.host.sim.cancel(seg.timer)
        seg.timer = None
        self._arm(seg)

    def _on_timeout(self, dest: int) -> None:
        seg = self.segments[dest]
        seg.timer = None
        st = seg.state
        if st.snd_una in seg.skipped:
            self._send_skip(seg, st.snd_una)
        if not any(not o.sacked for o in st.outstanding.values()):
            self._arm(seg)
            return
        lost = st.on_timeout(self.host.now)
        seg.retx = deque(lost)
        self.pump(dest)

    def on_ack(self, values: tuple) -> None:
        _, receiver_id, dest, cum, echo, *blocks = values
        seg = self.segments.get(dest)
        if seg is None:
            return
        st = seg.state
        if seg.receiver_id is None:
            seg.receiver_id = receiver_id
            if "rto_min" not in self.config:
                st.rto_min = self._propagation_floor(receiver_id)
        before_una = st.snd_una
        newly, fast = st.on_ack(cum, echo, blocks, self.host.now)
        for o in newly:
            if not self.retain:
                self.cache.discard(o.key)
            self.awaiting.pop(o.key, None)
        seg.skipped = {s for s in seg.skipped if s >= st.snd_una}
        if cum == before_una and st.snd_una in seg.skipped and st.dup_acks:
            self._send_skip(seg, st.snd_una)
        if fast is not None:
            o = st.outstanding.get(fast)
            if o is not None:
                o.lost = True
                self._retransmit(seg, fast, fast=True)
        if st.snd_una > before_una:
            self._restart(seg)
        self.pump(dest)
        if st.round_end is not None and st.snd_una >= st.round_end:
            st.cwnd_history.append(st.cwnd)
            st.round_end = st.snd_nxt

    def _propagation_floor(self, receiver_id: int) -> float:
        other = self.net.agents[receiver_id].host
        try:
            path = shortest_path(self.net.topo, self.host.pop, other.pop)
        except NoPath:
            return 0.0
        return 2.0 * 2.0 * self.net.topo.path_delay(path)

    def on_nack(self, values: tuple) -> None:
        requester, flow, dest, seq = values
        key = (flow, dest, seq)
        entry = self.cache.get(key)
        if entry is not None:
            seg = self.segment(dest)
            seg.refills.append(entry)
            self.pump(dest)
            return
        self.escalations += 1
        self.net.control_counters["escalations"] += 1
        self._nack_upstream(key, self.upstream_of.get(key))

    # -- receiver ----------------------------------------------------------
    def receive(self, p: Packet) -> bool:
        """Acknowledge segment data; False if it is a duplicate.

        Strips the segment TLV and remembers which agent sent the packet so
        losses further down can be escalated to it.
        """
        v = p.values(TlvKind.SEGMENT)
        if v is None:
            return True
        sender_id, s = v
        p.remove(TlvKind.SEGMENT)
        dests = p.destinations
        dest = dests[0] if dests else 0
        rs = self.receivers.setdefault((sender_id, dest), ReceiverState())
        new = rs.accept(s)
        self._ack(sender_id, dest, rs, s, p.app)
        if new:
            self.upstream_of[(p.flow_id, dest, p.seq)] = (sender_id, s)
        return new

    def on_skip(self, values: tuple) -> None:
        sender_id, dest, s = values
        rs = self.receivers.setdefault((sender_id, dest), ReceiverState())
        rs.accept(s)
        self._ack(sender_id, dest, rs, s, None)

    def _ack(self, sender_id, dest, rs: ReceiverState, echo: int, app) -> None:
        sender = self.net.agents.get(sender_id)
        if sender is None:
            return
        ack = Packet(app or self.host.app or _anon_app(), PacketKind.REGULAR, 0, 0, 0,
                     [make_tlv(TlvKind.ACK, sender_id, self.id, dest, rs.cum, echo,
                               *rs.sack_blocks())])
        self.net.count(ack, "sent")
        self.net.send_to(ack, self.host.pop, sender.host)

    def on_control(self, p: Packet) -> bool:
        """Dispatch ack, skip and nack packets; False if none applied."""
        self.net.count(p, "delivered")
        for t in p.tlvs:
            if t.kind == TlvKind.ACK:
                self.on_ack(tlv_values(t))
                return True
            if t.kind == TlvKind.SKIP:
                self.on_skip(tlv_values(t))
                return True
            if t.kind == TlvKind.NACK:
                self.on_nack(tlv_values(t))
                return True
        return False


def _anon_app():
    from .model import AppId

    return AppId(0, 0)


def fan_out(p: Packet, dests) -> list[Packet]:
    """One single-destination copy per destination (first reuses ``p``)."""
    out = []
    for i, d in enumerate(dests):
        q = p if i == 0 else p.copy()
        q.set_tlv(make_tlv(TlvKind.DESTINATIONS, d))
        out.append(q)
    return out


class TransportAssistant(NetworkFunction):
    """In-network agent: terminates the upstream segment, caches, re-sends.

    ``fallback_destinations`` lists the chain's destinations for packets
    that carry no DESTINATIONS TLV.
    """

    kind = "transport_assistant"

    def __init__(self, config=None):
        super().__init__(config)
        self.agent: TransportAgent | None = None

    def attach(self, host) -> None:
        super().attach(host)
        self.agent = TransportAgent(host, self.config)

    def process(self, p, host):
        agent = self.agent
        upstream = None
        v = p.values(TlvKind.SEGMENT)
        if v is not None:
            upstream = tuple(v)
            if not agent.receive(p):
                host.net.count(p, "duplicate")
                return []
        dests = p.destinations or tuple(self.config.get("fallback_destinations", ()))
        if len(dests) == 1 and agent.refill(p):
            return []
        copies = fan_out(p, dests)
        if len(copies) > 1:
            host.net.count(p, "replicated", len(copies) - 1)
        for q in copies:
            agent.send(q, q.destinations[0], upstream)
        return []

    def on_control(self, p):
        self.agent.on_control(p)

    # exposed for tests and reports
    def state(self, dest: int) -> RenoState:
        return self.agent.segment(dest).state
