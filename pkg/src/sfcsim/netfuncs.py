"""In-network functions.

Each function is a small state machine. The ``process(packet, host)`` method
is what a :class:`~sfcsim.engine.FunctionHost` calls at service completion;
the named operations (``ingress``, ``encode``, ``crop``, ``replicate`` ...)
are usable on their own without a simulator.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import replace

from .errors import UnknownFlow
from .model import (
    AppId,
    Command,
    FlowRequirement,
    Packet,
    PacketKind,
    TlvKind,
    make_tlv,
    tlv_values,
)

DEDUP_WINDOW = 1024


def _scaled(payload: int, factor: float) -> int:
    # rounding guard keeps 10000 * 0.4 at 4000 rather than 4001
    return int(math.ceil(round(payload * factor, 6)))


def signaling(app: AppId, *tlvs) -> Packet:
    return Packet(app, PacketKind.SIGNALING, 0, 0, 0, list(tlvs))


class NetworkFunction:
    """Pass-through base; subclasses override :meth:`process`."""

    kind = "forwarder"

    def __init__(self, config: dict | None = None):
        self.config = dict(config or {})
        self.host = None

    def attach(self, host) -> None:
        self.host = host

    def configure(self, **changes) -> None:
        self.config.update(changes)

    def process(self, p: Packet, host) -> list[Packet]:
        return [p]


class Forwarder(NetworkFunction):
    kind = "forwarder"


class Custom(NetworkFunction):
    """Delay plus an optional payload scaling; stands in for opaque functions."""

    kind = "custom"

    def process(self, p, host):
        scale = self.config.get("payload_scale", 1.0)
        if scale != 1.0:
            p.payload_bytes = _scaled(p.payload_bytes, scale)
        return [p]


# ---------------------------------------------------------------------------
# Application Assistant


class ApplicationAssistant(NetworkFunction):
    """Stamps per-flow requirements onto packets leaving an endpoint.

    ``policy`` maps flow id to its current FlowRequirement. ``rules`` maps a
    flow id to extra TLVs stamped on every packet of that flow. ``sensors``
    maps an OSAP id to its emission rate in bits per second.
    """

    kind = "application_assistant"

    def __init__(self, policy=None, rules=None, sensors=None, config=None):
        super().__init__(config)
        self.policy: dict[int, FlowRequirement] = dict(policy or {})
        self.rules: dict[int, list] = {k: list(v) for k, v in (rules or {}).items()}
        self.sensors: dict[int, float] = dict(sensors or {})
        self.disabled: set[int] = set()
        self.dropped = 0
        self.control_log: list[Packet] = []
        self.control_sink = None

    def ingress(self, p: Packet) -> list[Packet]:
        req = self.policy.get(p.flow_id)
        if p.flow_id in self.disabled:
            self.dropped += 1
            return []
        if req is not None:
            p.set_tlv(make_tlv(TlvKind.PRIORITY, req.priority))
            p.set_tlv(make_tlv(TlvKind.REQUIREMENT, req.min_throughput,
                               req.max_e2e_delay, req.max_loss_ratio))
            p.set_tlv(make_tlv(TlvKind.RELIABILITY, req.reliability.code,
                               req.reliability.deadline))
            if req.destinations:
                p.set_tlv(make_tlv(TlvKind.DESTINATIONS, *sorted(req.destinations)))
        for tlv in self.rules.get(p.flow_id, ()):
            p.set_tlv(tlv)
        return [p]

    def process(self, p, host):
        out = self.ingress(p)
        if not out:
            host.net.drop(p, "policy")
        return out

    def disable(self, flow_id: int) -> None:
        self.disabled.add(flow_id)

    def enable(self, flow_id: int) -> None:
        self.disabled.discard(flow_id)

    def update_context(self, flow_id: int, new_req: FlowRequirement) -> list[Packet]:
        """Swap a flow's requirement; returns the control messages sent.

        A change of ``min_throughput`` reconfigures the source OSAP's
        emission rate.
        """
        old = self.policy.get(flow_id)
        if old is None:
            raise UnknownFlow(f"flow {flow_id} is not managed by this assistant")
        if new_req.flow_id != flow_id:
            new_req = replace(new_req, flow_id=flow_id)
        if new_req == old:
            return []
        self.policy[flow_id] = new_req
        sent = []
        if new_req.min_throughput != old.min_throughput:
            osap = new_req.source_osap
            self.sensors[osap] = new_req.min_throughput
            app = self.config.get("app", AppId(0, 0))
            msg = signaling(app, make_tlv(TlvKind.COMMAND, Command.SET_RATE, osap,
                                          new_req.min_throughput))
            sent.append(msg)
            self.control_log.append(msg)
            if self.control_sink is not None:
                self.control_sink(msg)
        return sent


# ---------------------------------------------------------------------------
# Media transforms


def ratio_for_budget(raw_bps: float, budget_bps: float) -> float:
    """Largest compression ratio that squeezes ``raw_bps`` into the budget."""
    if raw_bps <= 0:
        return 1.0
    return min(1.0, budget_bps / raw_bps)


class Encoder(NetworkFunction):
    kind = "encoder"

    def __init__(self, config=None):
        super().__init__(config)
        r = self.config.setdefault("compression_ratio", 1.0)
        if not 0 < r <= 1:
            raise ValueError("compression_ratio must lie in (0, 1]")

    def encode(self, p: Packet) -> Packet:
        r = self.config["compression_ratio"]
        if r != 1.0:
            p.payload_bytes = _scaled(p.payload_bytes, r)
            p.set_tlv(make_tlv(TlvKind.COMPRESSION, r))
        return p

    def process(self, p, host):
        return [self.encode(p)]


class Cropper(NetworkFunction):
    """One copy per destination, payload scaled by that destination's interest.

    An INTEREST TLV on the packet takes precedence over the configured
    ``interest`` map; destinations missing from both keep everything.
    """

    kind = "cropper"

    def crop(self, p: Packet, interest: dict | None = None) -> list[Packet]:
        conf = dict(self.config.get("interest", {}))
        if interest is not None:
            conf.update(interest)
        tlv = p.values(TlvKind.INTEREST)
        from_tlv = dict(tlv) if tlv else {}
        dests = p.destinations
        if dests is None:
            dests = tuple(sorted(set(conf) | set(from_tlv)))
        out = []
        for d in dests:
            frac = from_tlv.get(d, conf.get(d, 1.0))
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"retained fraction {frac} for destination {d}")
            q = p.copy()
            q.payload_bytes = _scaled(p.payload_bytes, frac)
            q.set_tlv(make_tlv(TlvKind.DESTINATIONS, d))
            out.append(q)
        return out

    def process(self, p, host):
        out = self.crop(p)
        if len(out) > 1:
            host.net.count(p, "replicated", len(out) - 1)
        elif not out:
            host.net.count(p, "absorbed")
        return out


def partial_drop(p: Packet, fraction: float) -> Packet:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if fraction == 0.0:
        return p
    p.payload_bytes = _scaled(p.payload_bytes, 1.0 - fraction)
    p.set_tlv(make_tlv(TlvKind.DEGRADED, fraction))
    return p


class PartialDropper(NetworkFunction):
    """Trims packets flagged DROP_IF_CONGESTION (or all, if configured)."""

    kind = "custom"

    def process(self, p, host):
        frac = self.config.get("fraction", 0.0)
        if self.config.get("all_packets", False) or p.get(TlvKind.DROP_IF_CONGESTION):
            partial_drop(p, frac)
        return [p]


def bundle(ps: list[Packet]) -> Packet:
    """Merge packets of one flow under a single header."""
    if not ps:
        raise ValueError("nothing to bundle")
    if len({(p.app, p.flow_id) for p in ps}) != 1:
        raise ValueError("bundling only merges packets of one flow")
    first = min(ps, key=lambda p: p.seq)
    out = first.copy()
    out.payload_bytes = sum(p.payload_bytes for p in ps)
    out.created_at = min(p.created_at for p in ps)
    out.set_tlv(make_tlv(TlvKind.BUNDLE, len(ps)))
    return out


class Bundler(NetworkFunction):
    """Holds up to ``count`` packets per flow or ``timeout`` seconds, then bundles."""

    kind = "custom"

    def __init__(self, config=None):
        super().__init__(config)
        self.pending: dict[int, list] = {}
        self.timers = {}

    def process(self, p, host):
        count = int(self.config.get("count", 2))
        held = self.pending.setdefault(p.flow_id, [])
        held.append((p, host.now))
        if len(held) >= count:
            return self._release(p.flow_id, host)
        if len(held) == 1:
            self.timers[p.flow_id] = host.after(self.config.get("timeout", 0.01),
                                                self._expire, p.flow_id, host)
        return []

    def _release(self, flow_id, host):
        held = self.pending.pop(flow_id, [])
        host.sim.cancel(self.timers.pop(flow_id, None))
        if not held:
            return []
        now = host.now
        for p, t in held:
            p.delay_breakdown["queuing"] += now - t
        # the earliest packet's timing stands for the bundle
        out = bundle([p for p, _ in held])
        out.delay_breakdown = dict(min(held, key=lambda e: e[0].seq)[0].delay_breakdown)
        if len(held) > 1:
            host.net.count(out, "absorbed", len(held) - 1)
        return [out]

    def _expire(self, flow_id, host):
        self.timers.pop(flow_id, None)
        for out in self._release(flow_id, host):
            host.emit(out)


# ---------------------------------------------------------------------------
# DetNet replication, elimination and ordering


class ReplicationFunction(NetworkFunction):
    """PRF: emit one copy per egress path, each tagged with its path index."""

    kind = "prf"

    def replicate(self, p: Packet) -> list[Packet]:
        k = int(self.config.get("paths", 2))
        if k <= 1:
            return [p]
        out = []
        for i in range(k):
            q = p if i == 0 else p.copy()
            q.set_tlv(make_tlv(TlvKind.REPLICA, i, k))
            out.append(q)
        # first copy was tagged in place; re-copy so all share one TLV list shape
        out[0] = out[0].copy()
        return out

    def process(self, p, host):
        out = self.replicate(p)
        if len(out) > 1:
            host.net.count(p, "replicated", len(out) - 1)
        return out


class EliminationFunction(NetworkFunction):
    """PEF: pass the first copy of each (flow, seq) seen within the window.

    The window holds the last ``window`` distinct sequence numbers per flow
    with FIFO eviction; a duplicate arriving after its seq was evicted is
    passed again.
    """

    kind = "pef"

    def __init__(self, config=None):
        super().__init__(config)
        self.window = int(self.config.get("window", DEDUP_WINDOW))
        self._seen: dict[int, set] = {}
        self._order: dict[int, deque] = {}

    def eliminate(self, p: Packet) -> Packet | None:
        seen = self._seen.setdefault(p.flow_id, set())
        if p.seq in seen:
            return None
        order = self._order.setdefault(p.flow_id, deque())
        seen.add(p.seq)
        order.append(p.seq)
        if len(order) > self.window:
            seen.discard(order.popleft())
        p.remove(TlvKind.REPLICA)
        return p

    def process(self, p, host):
        out = self.eliminate(p)
        if out is None:
            host.net.count(p, "eliminated")
            return []
        return [out]


class OrderingFunction(NetworkFunction):
    """POF: release packets in strictly increasing seq per flow.

    A gap is waited on for ``reorder_timeout`` seconds measured from the
    arrival of the oldest held packet, then skipped. Packets older than the
    release point are discarded as late. Holding time counts as queuing.
    """

    kind = "pof"

    def __init__(self, config=None):
        super().__init__(config)
        self.timeout = float(self.config.get("reorder_timeout", 0.05))
        self.first_seq = int(self.config.get("first_seq", 0))
        self._next: dict[int, int] = {}
        self._held: dict[int, list] = {}
        self._timer = None
        self.late = 0
        self.skipped = 0

    def order(self, p: Packet, now: float) -> list[Packet]:
        flow = p.flow_id
        nxt = self._next.setdefault(flow, self.first_seq)
        if p.seq < nxt:
            self.late += 1
            return []
        held = self._held.setdefault(flow, [])
        if any(seq == p.seq for seq, _, _ in held):
            self.late += 1
            return []
        heapq.heappush(held, (p.seq, now, p))
        return self._drain(flow, now)

    def _drain(self, flow, now):
        held = self._held[flow]
        out = []
        while held and held[0][0] == self._next[flow]:
            seq, t, q = heapq.heappop(held)
            q.delay_breakdown["queuing"] += now - t
            out.append(q)
            self._next[flow] = seq + 1
        return out

    def next_deadline(self) -> float | None:
        times = [min(t for _, t, _ in held) + self.timeout
                 for held in self._held.values() if held]
        return min(times) if times else None

    def flush(self, now: float) -> list[Packet]:
        """Skip gaps whose wait has expired and release what follows."""
        out = []
        for flow in sorted(self._held):
            held = self._held[flow]
            while held and min(t for _, t, _ in held) + self.timeout <= now + 1e-12:
                self.skipped += held[0][0] - self._next[flow]
                self._next[flow] = held[0][0]
                out.extend(self._drain(flow, now))
        return out

    def process(self, p, host):
        late = self.late
        out = self.order(p, host.now)
        if self.late > late:
            host.net.drop(p, "late")
        self._arm(host)
        return out

    def _arm(self, host):
        deadline = self.next_deadline()
        if deadline is None:
            return
        if self._timer is not None and not self._timer.cancelled:
            if self._timer.time <= deadline:
                return
            host.sim.cancel(self._timer)
        self._timer = host.after(max(0.0, deadline - host.now), self._fire, host)

    def _fire(self, host):
        self._timer = None
        for q in self.flush(host.now):
            host.emit(q)
        self._arm(host)


# ---------------------------------------------------------------------------
# Monitoring


class MonitorFunction(NetworkFunction):
    """Appends a telemetry record per packet and reports threshold breaches.

    The record holds the POP id, the stamp time, and the queuing and
    processing delay accrued since the previous stamp (so the stamps of a
    packet sum to its queuing and processing totals at the last monitor).
    A packet whose age exceeds ``report_threshold`` is reported once.
    """

    kind = "monitor"

    def __init__(self, config=None):
        super().__init__(config)
        self.reports: list[dict] = []
        self.report_sink = None

    def stamp(self, p: Packet, pop: int, now: float) -> dict | None:
        prev_q = prev_pr = 0.0
        for t in p.get_all(TlvKind.TELEMETRY):
            _, _, q, pr = tlv_values(t)
            prev_q += q
            prev_pr += pr
        bd = p.delay_breakdown
        q_here = bd["queuing"] - prev_q
        pr_here = bd["processing"] - prev_pr
        p.tlvs.append(make_tlv(TlvKind.TELEMETRY, pop, now, q_here, pr_here))
        threshold = self.config.get("report_threshold", math.inf)
        age = now - p.created_at
        if age > threshold and p.get(TlvKind.REPORTED) is None:
            p.tlvs.append(make_tlv(TlvKind.REPORTED))
            hop = len(p.get_all(TlvKind.TELEMETRY))
            report = {"time": now, "pop": pop, "hop": hop, "flow": p.flow_id,
                      "seq": p.seq, "delay": age}
            self.reports.append(report)
            return report
        return None

    def process(self, p, host):
        if not self.config.get("enabled", True):
            return [p]
        report = self.stamp(p, host.pop, host.now)
        if report is not None:
            host.net.control_counters["reports"] += 1
            if self.report_sink is not None:
                msg = signaling(p.app, make_tlv(TlvKind.COMMAND, Command.REPORT,
                                                host.pop, report["delay"]),
                                p.get_all(TlvKind.TELEMETRY)[-1])
                self.report_sink(msg, report, host)
        return [p]


def telemetry_records(p) -> list[tuple]:
    """(pop, time, queuing, processing) per stamp on a packet or delivery record."""
    return [tlv_values(t) for t in p.tlvs if t.kind == TlvKind.TELEMETRY]


FUNCTION_CLASSES = {
    "application_assistant": ApplicationAssistant,
    "encoder": Encoder,
    "cropper": Cropper,
    "prf": ReplicationFunction,
    "pef": EliminationFunction,
    "pof": OrderingFunction,
    "forwarder": Forwarder,
    "monitor": MonitorFunction,
    "custom": Custom,
}


def make_function(kind: str, config: dict | None = None):
    """Instantiate the function class for an NF kind."""
    config = dict(config or {})
    if kind == "transport_assistant":
        from .transport import TransportAssistant

        return TransportAssistant(config)
    if kind == "custom":
        role = config.get("role")
        if role == "bundler":
            return Bundler(config)
        if role == "partial_drop":
            return PartialDropper(config)
    if kind == "application_assistant":
        return ApplicationAssistant(config=config)
    return FUNCTION_CLASSES[kind](config)
