"""Substrate, flow and packet types plus topology queries.

Everything here is plain data: the event kernel owns mutation of link and POP
state while a simulation runs.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

from .errors import InsufficientResources, MalformedHeader, NoPath

DELAY_COMPONENTS = (
    "propagation",
    "transmission",
    "processing",
    "queuing",
    "retransmission",
    "steering",
)

DEFAULT_QUEUE_BYTES = 150_000


def new_breakdown() -> dict[str, float]:
    return dict.fromkeys(DELAY_COMPONENTS, 0.0)


# ---------------------------------------------------------------------------
# Resources and substrate


@dataclass(frozen=True)
class ResourceVector:
    """CPU units, memory bytes and disk bytes (all abstract, all >= 0)."""

    cpu: float = 0.0
    memory: float = 0.0
    disk: float = 0.0

    def __post_init__(self):
        if self.cpu < 0 or self.memory < 0 or self.disk < 0:
            raise ValueError(f"negative resource component in {self}")

    def __add__(self, other: ResourceVector) -> ResourceVector:
        return ResourceVector(
            self.cpu + other.cpu, self.memory + other.memory, self.disk + other.disk
        )

    def __sub__(self, other: ResourceVector) -> ResourceVector:
        return ResourceVector(
            self.cpu - other.cpu, self.memory - other.memory, self.disk - other.disk
        )

    def fits_in(self, other: ResourceVector) -> bool:
        return (
            self.cpu <= other.cpu
            and self.memory <= other.memory
            and self.disk <= other.disk
        )

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.cpu, self.memory, self.disk)

    @classmethod
    def total(cls, vectors: Iterable[ResourceVector]) -> ResourceVector:
        vectors = list(vectors)
        return cls(
            math.fsum(v.cpu for v in vectors),
            math.fsum(v.memory for v in vectors),
            math.fsum(v.disk for v in vectors),
        )


ZERO = ResourceVector()


@dataclass(eq=False)
class Pop:
    """A point of presence with forwarding plus general-purpose compute.

    ``residual`` is derived from the live reservation ledger with exactly
    rounded sums, so reserving and then releasing the same key restores the
    previous value bit for bit.
    """

    id: int
    capacity: ResourceVector
    processing_model: dict[str, float] = field(default_factory=dict)
    up: bool = True
    reservations: dict = field(default_factory=dict, repr=False)

    @property
    def reserved(self) -> ResourceVector:
        return ResourceVector.total(self.reservations.values())

    @property
    def residual(self) -> ResourceVector:
        return self.capacity - self.reserved

    def can_host(self, demand: ResourceVector) -> bool:
        total = ResourceVector.total([*self.reservations.values(), demand])
        return total.fits_in(self.capacity)

    def reserve(self, key, demand: ResourceVector) -> None:
        if key in self.reservations:
            raise KeyError(f"duplicate reservation {key!r} on POP {self.id}")
        if not self.can_host(demand):
            raise InsufficientResources(
                f"POP {self.id} cannot host {demand}", item=key
            )
        self.reservations[key] = demand

    def unreserve(self, key) -> ResourceVector:
        return self.reservations.pop(key)


@dataclass(eq=False)
class PhysicalLink:
    """Full-duplex link; each direction serializes at ``bandwidth``.

    Bandwidth reservations draw from a single pool shared by both directions.
    """

    id: int
    a: int
    b: int
    bandwidth: float
    propagation_delay: float
    loss_probability: float = 0.0
    queue_bytes: int = DEFAULT_QUEUE_BYTES
    up: bool = True
    reservations: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError(f"link {self.id}: bandwidth must be positive")
        if self.propagation_delay < 0:
            raise ValueError(f"link {self.id}: negative propagation delay")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError(f"link {self.id}: loss probability outside [0, 1]")

    @property
    def endpoints(self) -> tuple[int, int]:
        return (self.a, self.b)

    def other(self, pop: int) -> int:
        if pop == self.a:
            return self.b
        if pop == self.b:
            return self.a
        raise ValueError(f"POP {pop} is not an endpoint of link {self.id}")

    @property
    def reserved_bandwidth(self) -> float:
        return math.fsum(self.reservations.values())

    @property
    def residual_bandwidth(self) -> float:
        return self.bandwidth - self.reserved_bandwidth

    def can_carry(self, bandwidth: float) -> bool:
        return math.fsum([*self.reservations.values(), bandwidth]) <= self.bandwidth

    def reserve(self, key, bandwidth: float) -> None:
        if key in self.reservations:
            raise KeyError(f"duplicate reservation {key!r} on link {self.id}")
        if not self.can_carry(bandwidth):
            raise InsufficientResources(
                f"link {self.id} cannot carry {bandwidth} b/s", item=key
            )
        self.reservations[key] = bandwidth

    def unreserve(self, key) -> float:
        return self.reservations.pop(key)


class PhysicalTopology:
    """POPs and links, with adjacency kept sorted by link id."""

    def __init__(self, pops: Iterable[Pop] = (), links: Iterable[PhysicalLink] = ()):
        self.pops: dict[int, Pop] = {}
        self.links: dict[int, PhysicalLink] = {}
        self._adj: dict[int, list[int]] = {}
        for pop in pops:
            self.add_pop(pop)
        for link in links:
            self.add_link(link)

    def add_pop(self, pop: Pop) -> Pop:
        if pop.id in self.pops:
            raise ValueError(f"duplicate POP id {pop.id}")
        self.pops[pop.id] = pop
        self._adj[pop.id] = []
        return pop

    def add_link(self, link: PhysicalLink) -> PhysicalLink:
        if link.id in self.links:
            raise ValueError(f"duplicate link id {link.id}")
        for end in link.endpoints:
            if end not in self.pops:
                raise ValueError(f"link {link.id} references unknown POP {end}")
        if link.a == link.b:
            raise ValueError(f"link {link.id} is a self-loop")
        self.links[link.id] = link
        self._adj[link.a].append(link.id)
        self._adj[link.b].append(link.id)
        self._adj[link.a].sort()
        self._adj[link.b].sort()
        return link

    def incident(self, pop: int) -> list[int]:
        return self._adj[pop]

    def link_between(self, a: int, b: int) -> PhysicalLink | None:
        for lid in self._adj[a]:
            if self.links[lid].other(a) == b:
                return self.links[lid]
        return None

    def is_connected(self, up_only: bool = True) -> bool:
        pops = [p for p in self.pops.values() if p.up or not up_only]
        if not pops:
            return True
        seen = {pops[0].id}
        stack = [pops[0].id]
        while stack:
            node = stack.pop()
            for lid in self._adj[node]:
                link = self.links[lid]
                if up_only and not link.up:
                    continue
                nxt = link.other(node)
                if up_only and not self.pops[nxt].up:
                    continue
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return len(seen) == len(pops)

    def path_pops(self, src: int, path: Sequence[int]) -> list[int]:
        """POP sequence visited by ``path`` starting at ``src``."""
        pops = [src]
        for lid in path:
            pops.append(self.links[lid].other(pops[-1]))
        return pops

    def path_delay(self, path: Sequence[int]) -> float:
        return math.fsum(self.links[lid].propagation_delay for lid in path)

    def residual_snapshot(self) -> dict:
        return {
            "pops": {pid: p.residual.as_tuple() for pid, p in sorted(self.pops.items())},
            "links": {
                lid: l.residual_bandwidth for lid, l in sorted(self.links.items())
            },
        }


def _link_cost(link: PhysicalLink, metric: str) -> float:
    if metric == "delay":
        return link.propagation_delay
    if metric == "hops":
        return 1.0
    raise ValueError(f"unknown path metric {metric!r}")


def shortest_path(
    topo: PhysicalTopology,
    src: int,
    dst: int,
    metric: str = "delay",
    *,
    min_bandwidth: float = 0.0,
    exclude_links: Iterable[int] = (),
    exclude_pops: Iterable[int] = (),
    bandwidth_used: dict[int, float] | None = None,
) -> list[int]:
    """Minimal path from ``src`` to ``dst`` as a list of link ids.

    Only links that are up, touch up POPs and can still carry
    ``min_bandwidth`` (after ``bandwidth_used`` tentative reservations) are
    considered. Ties resolve towards lower hop counts, then lower link ids.
    """
    if src not in topo.pops or dst not in topo.pops:
        raise NoPath(f"unknown POP in ({src}, {dst})")
    if src == dst:
        return []
    banned_links = set(exclude_links)
    banned_pops = set(exclude_pops) - {src, dst}
    if not topo.pops[src].up or not topo.pops[dst].up:
        raise NoPath(f"no path from POP {src} to POP {dst}: endpoint down")
    used = bandwidth_used or {}

    best: dict[int, tuple[float, int]] = {src: (0.0, 0)}
    prev: dict[int, int] = {}
    heap = [(0.0, 0, src)]
    done = set()
    while heap:
        cost, hops, node = heapq.heappop(heap)
        if node in done:
            continue
        done.add(node)
        if node == dst:
            break
        for lid in topo.incident(node):
            if lid in banned_links:
                continue
            link = topo.links[lid]
            if not link.up:
                continue
            nxt = link.other(node)
            if nxt in done or nxt in banned_pops or not topo.pops[nxt].up:
                continue
            if min_bandwidth > 0 and not link.can_carry(min_bandwidth + used.get(lid, 0.0)):
                continue
            cand = (cost + _link_cost(link, metric), hops + 1)
            if nxt not in best or cand < best[nxt]:
                best[nxt] = cand
                prev[nxt] = lid
                heapq.heappush(heap, (cand[0], cand[1], nxt))
    if dst not in done:
        raise NoPath(f"no path from POP {src} to POP {dst}")
    path = []
    node = dst
    while node != src:
        lid = prev[node]
        path.append(lid)
        node = topo.links[lid].other(node)
    path.reverse()
    return path


def disjoint_paths(
    topo: PhysicalTopology, src: int, dst: int, k: int, metric: str = "delay"
) -> list[list[int]]:
    """Up to ``k`` pairwise link-disjoint paths, shortest first.

    Iterative shortest path with removal of used links; this is a heuristic
    and can return fewer paths than the max-flow bound on trap topologies.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if src == dst:
        return [[]]
    paths: list[list[int]] = []
    used: set[int] = set()
    while len(paths) < k:
        try:
            path = shortest_path(topo, src, dst, metric, exclude_links=used)
        except NoPath:
            break
        paths.append(path)
        used.update(path)
    if not paths:
        raise NoPath(f"no path from POP {src} to POP {dst}")
    return paths


# ---------------------------------------------------------------------------
# Applications and flows


@dataclass(frozen=True, order=True)
class AppId:
    """Application identifier: 16-bit operator id plus 48-bit local id."""

    operator_id: int
    local_id: int

    def __post_init__(self):
        if not 0 <= self.operator_id < 1 << 16:
            raise ValueError(f"operator_id {self.operator_id} out of 16-bit range")
        if not 0 <= self.local_id < 1 << 48:
            raise ValueError(f"local_id {self.local_id} out of 48-bit range")

    def pack(self) -> int:
        return (self.operator_id << 48) | self.local_id

    @classmethod
    def unpack(cls, value: int) -> AppId:
        if not 0 <= value < 1 << 64:
            raise ValueError(f"app id {value} out of 64-bit range")
        return cls(value >> 48, value & ((1 << 48) - 1))

    def __str__(self):
        return f"{self.operator_id}:{self.local_id}"


@dataclass(frozen=True)
class Reliability:
    """``none``, ``full``, or ``partial`` with a retransmission deadline."""

    mode: str = "none"
    deadline: float = 0.0

    MODES = ("none", "partial", "full")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ValueError(f"unknown reliability mode {self.mode!r}")
        if self.deadline < 0:
            raise ValueError("negative reliability deadline")

    @property
    def code(self) -> int:
        return self.MODES.index(self.mode)

    @classmethod
    def from_code(cls, code: int, deadline: float = 0.0) -> Reliability:
        return cls(cls.MODES[code], deadline)

    def wants_retransmission(self, age: float) -> bool:
        if self.mode == "full":
            return True
        if self.mode == "partial":
            return age <= self.deadline
        return False


@dataclass(frozen=True)
class FlowRequirement:
    flow_id: int
    source_osap: int
    destinations: frozenset = frozenset()
    min_throughput: float = 0.0
    max_e2e_delay: float = math.inf
    max_loss_ratio: float = 1.0
    reliability: Reliability = Reliability()
    priority: int = 0

    def __post_init__(self):
        if not self.max_e2e_delay > 0:
            raise ValueError("max_e2e_delay must be positive")
        if not 0.0 <= self.max_loss_ratio <= 1.0:
            raise ValueError("max_loss_ratio must lie in [0, 1]")
        if not 0 <= self.priority < 256:
            raise ValueError("priority must fit in one byte")
        object.__setattr__(self, "destinations", frozenset(self.destinations))


# ---------------------------------------------------------------------------
# TLVs


class TlvKind(IntEnum):
    TIMESTAMP = 1
    PRIORITY = 2
    REQUIREMENT = 3
    RELIABILITY = 4
    DESTINATIONS = 5
    INTEREST = 6
    REPLICA = 7
    TELEMETRY = 8
    SEGMENT = 9
    ACK = 10
    SKIP = 11
    NACK = 12
    BUNDLE = 13
    DEGRADED = 14
    DROP_IF_CONGESTION = 15
    REPORTED = 16
    COMMAND = 17
    COMPRESSION = 18


class Command(IntEnum):
    SET_RATE = 1
    SET_PRIORITY = 2
    INSTANTIATE = 3
    ACTIVATE = 4
    REPORT = 5
    SWITCHOVER = 6
    SCALE_OUT = 7
    SCALE_IN = 8
    FAILURE = 9


# kind -> (fixed head format, repeated tail format or None)
_TLV_FORMATS = {
    TlvKind.TIMESTAMP: (">d", None),
    TlvKind.PRIORITY: (">B", None),
    TlvKind.REQUIREMENT: (">ddd", None),
    TlvKind.RELIABILITY: (">Bd", None),
    TlvKind.DESTINATIONS: (">", ">I"),
    TlvKind.INTEREST: (">", ">Id"),
    TlvKind.REPLICA: (">BB", None),
    TlvKind.TELEMETRY: (">Iddd", None),
    # sender agent, segment sequence number
    TlvKind.SEGMENT: (">IQ", None),
    # sender agent, receiver agent, destination, cumulative ack, echoed segment
    TlvKind.ACK: (">IIIQQ", ">QQ"),
    # sender agent, destination, segment
    TlvKind.SKIP: (">IIQ", None),
    # requesting agent, flow, destination, application seq
    TlvKind.NACK: (">IIIQ", None),
    TlvKind.BUNDLE: (">H", None),
    TlvKind.DEGRADED: (">d", None),
    TlvKind.DROP_IF_CONGESTION: (">", None),
    TlvKind.REPORTED: (">", None),
    TlvKind.COMMAND: (">BId", None),
    TlvKind.COMPRESSION: (">d", None),
}
_STRUCTS = {
    kind: (struct.Struct(head), struct.Struct(tail) if tail else None)
    for kind, (head, tail) in _TLV_FORMATS.items()
}


@dataclass(frozen=True, slots=True)
class Tlv:
    kind: int
    value: bytes = b""

    def __post_init__(self):
        if not 0 <= self.kind < 1 << 16:
            raise ValueError(f"TLV kind {self.kind} out of 16-bit range")
        if len(self.value) >= 1 << 16:
            raise ValueError("TLV value longer than 65535 bytes")

    @property
    def length(self) -> int:
        return len(self.value)

    @property
    def wire_size(self) -> int:
        return 4 + len(self.value)


def make_tlv(kind: TlvKind, *values) -> Tlv:
    """Build a known-kind TLV; repeated kinds take one tuple per entry."""
    head, tail = _STRUCTS[kind]
    n_head = len(head.unpack(bytes(head.size)))
    body = head.pack(*values[:n_head])
    if tail is not None:
        for item in values[n_head:]:
            body += tail.pack(*(item if isinstance(item, tuple) else (item,)))
    elif len(values) != n_head:
        raise ValueError(f"{kind.name} takes {n_head} values, got {len(values)}")
    return Tlv(int(kind), body)


def tlv_values(tlv: Tlv) -> tuple:
    """Decode a known-kind TLV into its head values followed by repeats."""
    head, tail = _STRUCTS[TlvKind(tlv.kind)]
    try:
        out = list(head.unpack_from(tlv.value, 0))
        rest = tlv.value[head.size:]
        if tail is not None:
            if len(rest) % tail.size:
                raise MalformedHeader(f"ragged {TlvKind(tlv.kind).name} TLV")
            for off in range(0, len(rest), tail.size):
                item = tail.unpack_from(rest, off)
                out.append(item[0] if len(item) == 1 else item)
        elif rest:
            raise MalformedHeader(f"oversized {TlvKind(tlv.kind).name} TLV")
    except struct.error as exc:
        raise MalformedHeader(str(exc)) from None
    return tuple(out)


# ---------------------------------------------------------------------------
# Packets


class PacketKind(IntEnum):
    SIGNALING = 0
    REGULAR = 1


_HEADER = struct.Struct(">QBIQIH")
HEADER_BYTES = _HEADER.size  # 27
_TLV_HEADER = struct.Struct(">HH")


@dataclass(slots=True)
class Packet:
    """One packet: wire fields plus simulation-only timing metadata.

    Equality covers the wire fields only, so ``decode(encode(p)) == p``.
    """

    app: AppId
    kind: PacketKind
    flow_id: int
    seq: int
    payload_bytes: int = 0
    tlvs: list = field(default_factory=list)
    created_at: float = field(default=0.0, compare=False)
    delay_breakdown: dict = field(default_factory=new_breakdown, compare=False)

    def __post_init__(self):
        if self.kind == PacketKind.SIGNALING and self.payload_bytes:
            raise ValueError("signaling packets carry no payload")
        if self.payload_bytes < 0:
            raise ValueError("negative payload")

    @property
    def size(self) -> int:
        return HEADER_BYTES + sum(4 + len(t.value) for t in self.tlvs) + self.payload_bytes

    @property
    def header_bytes(self) -> int:
        return self.size - self.payload_bytes

    @property
    def total_delay(self) -> float:
        return math.fsum(self.delay_breakdown.values())

    def add_delay(self, component: str, seconds: float) -> None:
        self.delay_breakdown[component] += seconds

    def get(self, kind: int) -> Tlv | None:
        for t in self.tlvs:
            if t.kind == kind:
                return t
        return None

    def get_all(self, kind: int) -> list[Tlv]:
        return [t for t in self.tlvs if t.kind == kind]

    def values(self, kind: int) -> tuple | None:
        t = self.get(kind)
        return None if t is None else tlv_values(t)

    def set_tlv(self, tlv: Tlv) -> None:
        """Replace the first TLV of the same kind, or append."""
        for i, t in enumerate(self.tlvs):
            if t.kind == tlv.kind:
                self.tlvs[i] = tlv
                return
        self.tlvs.append(tlv)

    def remove(self, kind: int) -> None:
        self.tlvs = [t for t in self.tlvs if t.kind != kind]

    def copy(self) -> Packet:
        return Packet(
            self.app,
            self.kind,
            self.flow_id,
            self.seq,
            self.payload_bytes,
            list(self.tlvs),
            self.created_at,
            dict(self.delay_breakdown),
        )

    # convenience accessors for frequently used metadata
    @property
    def priority(self) -> int:
        v = self.values(TlvKind.PRIORITY)
        return 255 if v is None else v[0]

    @property
    def destinations(self) -> tuple | None:
        return self.values(TlvKind.DESTINATIONS)

    @property
    def reliability(self) -> Reliability:
        v = self.values(TlvKind.RELIABILITY)
        return Reliability() if v is None else Reliability.from_code(v[0], v[1])


def encode_packet(p: Packet) -> bytes:
    parts = [
        _HEADER.pack(
            p.app.pack(), int(p.kind), p.flow_id, p.seq, p.payload_bytes, len(p.tlvs)
        )
    ]
    for t in p.tlvs:
        parts.append(_TLV_HEADER.pack(t.kind, len(t.value)))
        parts.append(t.value)
    return b"".join(parts)


def decode_packet(data: bytes) -> Packet:
    if len(data) < HEADER_BYTES:
        raise MalformedHeader(f"need {HEADER_BYTES} header bytes, got {len(data)}")
    app, kind, flow_id, seq, payload, count = _HEADER.unpack_from(data, 0)
    if kind not in (0, 1):
        raise MalformedHeader(f"unknown packet kind {kind}")
    off = HEADER_BYTES
    tlvs = []
    for i in range(count):
        if off + 4 > len(data):
            raise MalformedHeader(f"TLV {i} header truncated")
        t_kind, t_len = _TLV_HEADER.unpack_from(data, off)
        off += 4
        if off + t_len > len(data):
            raise MalformedHeader(f"TLV {i} length {t_len} overruns buffer")
        tlvs.append(Tlv(t_kind, bytes(data[off:off + t_len])))
        off += t_len
    if off != len(data):
        raise MalformedHeader(f"{len(data) - off} trailing bytes after TLVs")
    try:
        return Packet(AppId.unpack(app), PacketKind(kind), flow_id, seq, payload, tlvs)
    except ValueError as exc:
        raise MalformedHeader(str(exc)) from None
