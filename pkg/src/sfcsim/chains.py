"""Service function chains and their two-step allocation.

``translate`` turns a chain into a virtual topology of instances;
``map_chain`` places those instances on POPs and routes the instance-level
virtual links, committing all reservations or none.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable

from .errors import InsufficientResources, InvalidSpec, NoPath, NotCommitted
from .model import AppId, PhysicalTopology, ResourceVector, ZERO, shortest_path

NF_KINDS = (
    "application_assistant",
    "transport_assistant",
    "encoder",
    "cropper",
    "prf",
    "pef",
    "pof",
    "forwarder",
    "monitor",
    "custom",
)
TRANSPORT_MODES = ("datagram", "baseline", "assisted")


@dataclass
class NfSpec:
    name: str
    kind: str
    per_instance_capacity: float
    per_instance_resources: ResourceVector = ZERO
    per_packet_processing_delay: float = 0.0
    config: dict = field(default_factory=dict)
    allowed_pops: tuple | None = None
    min_instances: int = 1

    def __post_init__(self):
        if self.kind not in NF_KINDS:
            raise InvalidSpec(f"NF {self.name!r}: unknown kind {self.kind!r}")
        if not self.per_instance_capacity > 0:
            raise InvalidSpec(f"NF {self.name!r}: capacity must be positive")
        if self.per_packet_processing_delay < 0:
            raise InvalidSpec(f"NF {self.name!r}: negative processing delay")


@dataclass
class Endpoint:
    """An application endpoint; an Application Assistant runs on every one."""

    id: int
    pop: int
    role: str = "source"

    def __post_init__(self):
        if self.role not in ("source", "destination"):
            raise InvalidSpec(f"endpoint {self.id}: unknown role {self.role!r}")

    @property
    def node(self) -> str:
        return endpoint_node(self.id)


def endpoint_node(endpoint_id: int) -> str:
    return f"ep{endpoint_id}"


@dataclass
class VLinkSpec:
    src: str
    dst: str
    bandwidth: float
    max_delay: float = math.inf


@dataclass
class ChainSpec:
    app: AppId
    endpoints: list[Endpoint]
    nfs: list[NfSpec]
    vlinks: list[VLinkSpec]
    e2e_delay_bound: float = math.inf
    demand: float = 1.0
    max_packet_bytes: int = 1500
    transport: str = "datagram"

    @property
    def sources(self) -> list[int]:
        return [e.id for e in self.endpoints if e.role == "source"]

    @property
    def destinations(self) -> list[int]:
        return [e.id for e in self.endpoints if e.role == "destination"]

    def nf(self, name: str) -> NfSpec:
        for nf in self.nfs:
            if nf.name == name:
                return nf
        raise KeyError(name)

    def node_names(self) -> list[str]:
        return [e.node for e in self.endpoints] + [nf.name for nf in self.nfs]

    def validate(self) -> None:
        """Raise InvalidSpec unless the chain is a DAG linking all endpoints."""
        if self.transport not in TRANSPORT_MODES:
            raise InvalidSpec(f"unknown transport mode {self.transport!r}")
        if not self.sources or not self.destinations:
            raise InvalidSpec("chain needs at least one source and one destination")
        names = self.node_names()
        if len(set(names)) != len(names):
            raise InvalidSpec("duplicate NF name or endpoint id")
        for nf in self.nfs:
            if nf.name.startswith("ep") and nf.name[2:].isdigit():
                raise InvalidSpec(f"NF name {nf.name!r} collides with endpoint naming")
        known = set(names)
        succ = {n: [] for n in names}
        for vl in self.vlinks:
            for end in (vl.src, vl.dst):
                if end not in known:
                    raise InvalidSpec(f"virtual link references unknown node {end!r}")
            if vl.bandwidth < 0:
                raise InvalidSpec(f"virtual link {vl.src}->{vl.dst}: negative bandwidth")
            succ[vl.src].append(vl.dst)
        for e in self.endpoints:
            if e.role == "destination" and succ[e.node]:
                raise InvalidSpec(f"destination endpoint {e.id} has outgoing links")
        _topo_order(names, succ)  # raises on cycles
        for s in self.sources:
            reach = _reachable(endpoint_node(s), succ)
            for d in self.destinations:
                if endpoint_node(d) not in reach:
                    raise InvalidSpec(f"chain does not connect source {s} to destination {d}")
        if self.demand <= 0:
            raise InvalidSpec("demand must be positive")


def _reachable(start, succ):
    seen = {start}
    stack = [start]
    while stack:
        for nxt in succ[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def _topo_order(nodes, succ):
    indeg = {n: 0 for n in nodes}
    for n in nodes:
        for m in succ[n]:
            indeg[m] += 1
    ready = [n for n in nodes if indeg[n] == 0]
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
    if len(order) != len(nodes):
        raise InvalidSpec("chain contains a cycle")
    return order


# ---------------------------------------------------------------------------
# Translation


@dataclass
class Instance:
    id: str
    nf: NfSpec
    resources: ResourceVector
    demand_share: float
    index: int


@dataclass
class InstanceLink:
    id: str
    src: str
    dst: str
    bandwidth: float
    max_delay: float = math.inf


class VirtualTopology:
    """Instances plus instance-level virtual links; endpoints appear as nodes."""

    def __init__(self, spec: ChainSpec):
        self.spec = spec
        self.endpoints = {e.node: e for e in spec.endpoints}
        self.instances: dict[str, Instance] = {}
        self.vlinks: dict[str, InstanceLink] = {}
        self._next_index: dict[str, int] = {}

    def instances_of(self, nf_name: str) -> list[Instance]:
        return [i for i in self.instances.values() if i.nf.name == nf_name]

    def nodes_of(self, name: str) -> list[str]:
        """Instance ids of an NF, or the endpoint node itself."""
        if name in self.endpoints:
            return [name]
        return [i.id for i in self.instances_of(name)]

    def counts(self) -> dict[str, int]:
        return {nf.name: len(self.instances_of(nf.name)) for nf in self.spec.nfs}

    def out_links(self, node: str) -> list[InstanceLink]:
        return [vl for vl in self.vlinks.values() if vl.src == node]

    def in_links(self, node: str) -> list[InstanceLink]:
        return [vl for vl in self.vlinks.values() if vl.dst == node]

    def node_label(self, node: str) -> str:
        """Chain-level name (NF name or endpoint node) of a topology node."""
        return node if node in self.endpoints else self.instances[node].nf.name

    def new_instance(self, nf: NfSpec, share: float) -> Instance:
        idx = self._next_index.get(nf.name, 0)
        self._next_index[nf.name] = idx + 1
        inst = Instance(f"{nf.name}.{idx}", nf, nf.per_instance_resources, share, idx)
        self.instances[inst.id] = inst
        return inst

    def expand_vlinks(self, only_touching: str | None = None) -> list[InstanceLink]:
        """(Re)create instance-level links for chain links; returns new ones."""
        added = []
        for vl in self.spec.vlinks:
            srcs = self.nodes_of(vl.src)
            dsts = self.nodes_of(vl.dst)
            share = vl.bandwidth / (len(srcs) * len(dsts))
            for a, b in itertools.product(srcs, dsts):
                if only_touching is not None and only_touching not in (a, b):
                    continue
                lid = f"{a}>{b}"
                if lid in self.vlinks:
                    continue
                link = InstanceLink(lid, a, b, share, vl.max_delay)
                self.vlinks[lid] = link
                added.append(link)
        return added

    def to_dict(self) -> dict:
        return {
            "instances": {
                i.id: {"nf": i.nf.name, "kind": i.nf.kind, "cpu": i.resources.cpu,
                       "memory": i.resources.memory, "disk": i.resources.disk,
                       "demand_share": i.demand_share}
                for i in self.instances.values()
            },
            "vlinks": {
                vl.id: {"src": vl.src, "dst": vl.dst, "bandwidth": vl.bandwidth}
                for vl in self.vlinks.values()
            },
        }


def instance_count(demand: float, capacity: float, minimum: int = 1) -> int:
    # rounding guards against 0.3/0.1-style float noise
    return max(minimum, math.ceil(round(demand / capacity, 9)))


def translate(spec: ChainSpec) -> VirtualTopology:
    spec.validate()
    vt = VirtualTopology(spec)
    for nf in spec.nfs:
        n = instance_count(spec.demand, nf.per_instance_capacity, nf.min_instances)
        for _ in range(n):
            vt.new_instance(nf, spec.demand / n)
    vt.expand_vlinks()
    return vt


# ---------------------------------------------------------------------------
# Mapping


@dataclass
class EmbeddingPlan:
    id: int
    vt: VirtualTopology
    placement: dict = field(default_factory=dict)
    routing: dict = field(default_factory=dict)
    replica_routing: dict = field(default_factory=dict)
    committed: bool = False

    @staticmethod
    def new_id(topo: PhysicalTopology) -> int:
        """Next plan id for ``topo``; ids restart for every topology object."""
        counter = getattr(topo, "_plan_ids", None)
        if counter is None:
            counter = topo._plan_ids = itertools.count(1)
        return next(counter)

    def pop_demands(self) -> dict[int, ResourceVector]:
        out: dict[int, list] = {}
        for iid, inst in self.vt.instances.items():
            if iid in self.placement:
                out.setdefault(self.placement[iid], []).append(inst.resources)
        return {pop: ResourceVector.total(v) for pop, v in sorted(out.items())}

    def link_demands(self) -> dict[int, float]:
        out: dict[int, list] = {}
        for vid, paths in self._all_paths():
            bw = self.vt.vlinks[vid].bandwidth
            for path in paths:
                for lid in path:
                    out.setdefault(lid, []).append(bw)
        return {lid: math.fsum(v) for lid, v in sorted(out.items())}

    def _all_paths(self):
        for vid in self.vt.vlinks:
            if vid in self.replica_routing:
                yield vid, self.replica_routing[vid]
            elif vid in self.routing:
                yield vid, [self.routing[vid]]

    def reservation_keys(self):
        """(pop or link, key, amount) triples this plan reserves."""
        for iid, inst in self.vt.instances.items():
            if iid in self.placement:
                yield ("pop", self.placement[iid], (self.id, iid), inst.resources)
        for vid, paths in self._all_paths():
            bw = self.vt.vlinks[vid].bandwidth
            for k, path in enumerate(paths):
                for lid in path:
                    yield ("link", lid, (self.id, vid, k), bw)

    def hosting_pops(self) -> set[int]:
        return {self.placement[i] for i in self.vt.instances if i in self.placement}

    def used_links(self) -> set[int]:
        return {lid for _, paths in self._all_paths() for p in paths for lid in p}

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "committed": self.committed,
            "placement": dict(sorted(self.placement.items())),
            "routing": dict(sorted(self.routing.items())),
            "replica_routing": dict(sorted(self.replica_routing.items())),
            "reserved_pops": {
                str(p): r.as_tuple() for p, r in self.pop_demands().items()
            },
            "reserved_links": {str(l): bw for l, bw in self.link_demands().items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def delay_matrix(topo: PhysicalTopology, exclude_pops=(), exclude_links=()) -> dict:
    """All-pairs propagation distance over up elements (inf if disconnected)."""
    dist = {}
    for a in topo.pops:
        for b in topo.pops:
            try:
                path = shortest_path(topo, a, b, exclude_pops=exclude_pops,
                                     exclude_links=exclude_links)
                dist[a, b] = topo.path_delay(path)
            except NoPath:
                dist[a, b] = math.inf
    return dist


def _utilization(used: ResourceVector, cap: ResourceVector) -> float:
    ratios = [u / c for u, c in zip(used.as_tuple(), cap.as_tuple()) if c > 0]
    return max(ratios, default=0.0)


def _place_instances(vt, topo, objective, order, placement, pop_usage, dist,
                     exclude_pops, anti_affinity):
    for inst in order:
        candidates = []
        for pid in sorted(topo.pops):
            pop = topo.pops[pid]
            if not pop.up or pid in exclude_pops:
                continue
            if inst.id in anti_affinity and pid in anti_affinity[inst.id]:
                continue
            if inst.nf.allowed_pops is not None and pid not in inst.nf.allowed_pops:
                continue
            if not pop.can_host(ResourceVector.total([*pop_usage.get(pid, []), inst.resources])):
                continue
            candidates.append(pid)
        if not candidates:
            raise InsufficientResources(
                f"no POP can host instance {inst.id} ({inst.resources})", item=inst.id
            )
        neighbours = [vl.dst for vl in vt.out_links(inst.id)] + [
            vl.src for vl in vt.in_links(inst.id)
        ]
        placed = [placement[n] for n in neighbours if n in placement]
        anchors = placed or [placement[n] for n in vt.endpoints if n in placement]

        def delay_score(pid):
            return math.fsum(dist[pid, other] for other in anchors)

        def key(pid):
            if objective == "min_delay":
                return (delay_score(pid), pid)
            pop = topo.pops[pid]
            used = ResourceVector.total([pop.reserved, *pop_usage.get(pid, []), inst.resources])
            return (_utilization(used, pop.capacity), delay_score(pid), pid)

        best = min(candidates, key=key)
        if not math.isfinite(delay_score(best)):
            raise InsufficientResources(
                f"instance {inst.id} cannot reach its neighbours", item=inst.id
            )
        placement[inst.id] = best
        pop_usage.setdefault(best, []).append(inst.resources)


def _route_vlinks(vt, topo, vlinks, placement, link_usage, exclude_pops, exclude_links,
                  routing, replica_routing):
    for vl in vlinks:
        a, b = placement[vl.src], placement[vl.dst]
        src_kind = vt.instances[vl.src].nf.kind if vl.src in vt.instances else None
        copies = 1
        if src_kind == "prf":
            copies = int(vt.instances[vl.src].nf.config.get("paths", 2))
        paths = []
        banned = set(exclude_links)
        for _ in range(copies):
            try:
                path = _route_one(topo, a, b, vl.bandwidth, link_usage, exclude_pops, banned)
            except NoPath:
                if copies > 1 and len(paths) >= 1:
                    raise InsufficientResources(
                        f"only {len(paths)} disjoint paths for {vl.id}, need {copies}",
                        item=vl.id,
                    ) from None
                raise InsufficientResources(
                    f"no feasible path for virtual link {vl.id}", item=vl.id
                ) from None
            if topo.path_delay(path) > vl.max_delay:
                raise InsufficientResources(
                    f"virtual link {vl.id} exceeds its delay limit", item=vl.id
                )
            for lid in path:
                link_usage[lid] = link_usage.get(lid, 0.0) + vl.bandwidth
            paths.append(path)
            banned.update(path)
            if a == b:
                break
        if copies > 1 and a != b:
            replica_routing[vl.id] = paths
        routing[vl.id] = paths[0]


def _route_one(topo, a, b, bandwidth, link_usage, exclude_pops, exclude_links):
    if a == b:
        return []
    return shortest_path(topo, a, b, "delay", min_bandwidth=bandwidth,
                         bandwidth_used=link_usage, exclude_pops=exclude_pops,
                         exclude_links=exclude_links)


def placement_order(vt: VirtualTopology) -> list[Instance]:
    stage = {nf.name: i for i, nf in enumerate(vt.spec.nfs)}
    return sorted(
        vt.instances.values(),
        key=lambda i: (-i.resources.cpu, -i.resources.memory, -i.resources.disk,
                       stage[i.nf.name], i.index),
    )


def map_chain(vt: VirtualTopology, topo: PhysicalTopology, objective: str = "min_delay", *,
              exclude_pops: Iterable[int] = (), exclude_links: Iterable[int] = (),
              anti_affinity: dict | None = None, commit: bool = True) -> EmbeddingPlan:
    """Greedy placement then delay-shortest feasible routing.

    Instances go in descending resource order onto the feasible POP that
    minimises the objective: ``min_delay`` sums the propagation distance to
    already-placed neighbours, ``load_balance`` takes the post-placement
    utilisation of the candidate. Ties go to the lowest POP id. Nothing is
    reserved unless every instance and link fits and the plan validates.
    """
    if objective not in ("min_delay", "load_balance"):
        raise ValueError(f"unknown objective {objective!r}")
    exclude_pops = set(exclude_pops)
    exclude_links = set(exclude_links)
    plan = EmbeddingPlan(EmbeddingPlan.new_id(topo), vt)
    for node, ep in vt.endpoints.items():
        if ep.pop not in topo.pops:
            raise InvalidSpec(f"endpoint {ep.id} sits on unknown POP {ep.pop}")
        if not topo.pops[ep.pop].up:
            raise InsufficientResources(f"endpoint {ep.id} POP {ep.pop} is down", item=node)
        plan.placement[node] = ep.pop
    dist = delay_matrix(topo, exclude_pops, exclude_links)
    _place_instances(vt, topo, objective, placement_order(vt), plan.placement, {}, dist,
                     exclude_pops, anti_affinity or {})
    _route_vlinks(vt, topo, list(vt.vlinks.values()), plan.placement, {}, exclude_pops,
                  exclude_links, plan.routing, plan.replica_routing)
    problems = validate(plan, topo, vt.spec)
    if problems:
        raise InsufficientResources(
            f"plan violates constraints: {problems[0].message}", item=problems[0].target
        )
    if commit:
        commit_plan(plan, topo)
    return plan


def _owner(key):
    """Plan id of a reservation key made by this module; None for foreign keys."""
    return key[0] if isinstance(key, tuple) and key else None


def plan_objective(plan: EmbeddingPlan, topo: PhysicalTopology, objective: str = "min_delay",
                   dist: dict | None = None) -> float:
    """Total vlink propagation distance, or peak POP utilisation."""
    if objective == "min_delay":
        dist = dist or delay_matrix(topo)
        return math.fsum(
            dist[plan.placement[vl.src], plan.placement[vl.dst]] for vl in plan.vt.vlinks.values()
        )
    demands = plan.pop_demands()
    worst = 0.0
    for pid, pop in topo.pops.items():
        others = [v for k, v in pop.reservations.items() if _owner(k) != plan.id]
        used = ResourceVector.total([*others, demands.get(pid, ZERO)])
        worst = max(worst, _utilization(used, pop.capacity))
    return worst


# ---------------------------------------------------------------------------
# Validation and commitment


@dataclass
class Violation:
    kind: str
    target: str
    message: str
    slack: float | None = None


def worst_case_delay(plan: EmbeddingPlan, topo: PhysicalTopology, spec: ChainSpec) -> float:
    """Longest static source-to-destination delay through the instance graph.

    Each vlink contributes propagation plus per-hop transmission of a
    maximum-size packet; each instance contributes its processing delay.
    Queuing is not included.
    """
    vt = plan.vt
    size_bits = spec.max_packet_bytes * 8.0

    def link_delay(vl):
        path = plan.routing.get(vl.id, [])
        paths = plan.replica_routing.get(vl.id, [path])
        return max(
            math.fsum(topo.links[l].propagation_delay + size_bits / topo.links[l].bandwidth
                      for l in p)
            for p in paths
        )

    nodes = list(vt.endpoints) + list(vt.instances)
    succ = {n: [] for n in nodes}
    for vl in vt.vlinks.values():
        succ[vl.src].append(vl)
    order = _topo_order(nodes, {n: [vl.dst for vl in succ[n]] for n in nodes})
    best = {n: -math.inf for n in nodes}
    for s in spec.sources:
        best[endpoint_node(s)] = 0.0
    for n in order:
        if best[n] == -math.inf:
            continue
        here = best[n] + (vt.instances[n].nf.per_packet_processing_delay
                          if n in vt.instances else 0.0)
        for vl in succ[n]:
            best[vl.dst] = max(best[vl.dst], here + link_delay(vl))
    return max(best[endpoint_node(d)] for d in spec.destinations)


def validate(plan: EmbeddingPlan, topo: PhysicalTopology, spec: ChainSpec | None = None
             ) -> list[Violation]:
    spec = spec or plan.vt.spec
    out: list[Violation] = []
    for pid, demand in plan.pop_demands().items():
        pop = topo.pops.get(pid)
        if pop is None:
            out.append(Violation("placement", f"pop:{pid}", f"unknown POP {pid}"))
            continue
        others = [v for k, v in pop.reservations.items() if _owner(k) != plan.id]
        total = ResourceVector.total([*others, demand])
        if not total.fits_in(pop.capacity):
            out.append(Violation(
                "capacity", f"pop:{pid}",
                f"POP {pid} over capacity: {total} > {pop.capacity}",
                slack=pop.capacity.cpu - total.cpu,
            ))
    for lid, bw in plan.link_demands().items():
        link = topo.links.get(lid)
        if link is None:
            out.append(Violation("path", f"link:{lid}", f"unknown link {lid}"))
            continue
        others = [v for k, v in link.reservations.items() if _owner(k) != plan.id]
        total = math.fsum([*others, bw])
        if total > link.bandwidth:
            out.append(Violation(
                "bandwidth", f"link:{lid}",
                f"link {lid} over bandwidth: {total} > {link.bandwidth}",
                slack=link.bandwidth - total,
            ))
    for vid, paths in plan._all_paths():
        vl = plan.vt.vlinks[vid]
        a, b = plan.placement.get(vl.src), plan.placement.get(vl.dst)
        for path in paths:
            pop = a
            ok = a is not None and b is not None
            for lid in path if ok else ():
                link = topo.links.get(lid)
                if link is None or pop not in link.endpoints:
                    ok = False
                    break
                pop = link.other(pop)
            if not ok or pop != b:
                out.append(Violation("path", f"vlink:{vid}",
                                     f"path {path} does not join POP {a} to POP {b}"))
    unplaced = [n for n in list(plan.vt.instances) + list(plan.vt.endpoints)
                if n not in plan.placement]
    for n in unplaced:
        out.append(Violation("placement", n, f"{n} is not placed"))
    missing = [v for v in plan.vt.vlinks if v not in plan.routing]
    for v in missing:
        out.append(Violation("path", f"vlink:{v}", f"virtual link {v} is not routed"))
    if not out and math.isfinite(spec.e2e_delay_bound):
        worst = worst_case_delay(plan, topo, spec)
        if worst > spec.e2e_delay_bound:
            out.append(Violation(
                "delay", "chain",
                f"worst-case delay {worst:.6g}s exceeds bound {spec.e2e_delay_bound:.6g}s",
                slack=spec.e2e_delay_bound - worst,
            ))
    return out


def commit_plan(plan: EmbeddingPlan, topo: PhysicalTopology) -> None:
    """Reserve everything the plan needs, atomically."""
    if plan.committed:
        raise ValueError(f"plan {plan.id} already committed")
    done = []
    try:
        for what, ident, key, amount in plan.reservation_keys():
            target = topo.pops[ident] if what == "pop" else topo.links[ident]
            target.reserve(key, amount)
            done.append((target, key))
    except Exception:
        for target, key in done:
            target.unreserve(key)
        raise
    plan.committed = True


def release(plan: EmbeddingPlan, topo: PhysicalTopology) -> None:
    if not plan.committed:
        raise NotCommitted(f"plan {plan.id} is not committed")
    for what, ident, key, _ in plan.reservation_keys():
        target = topo.pops[ident] if what == "pop" else topo.links[ident]
        target.reservations.pop(key, None)
    plan.committed = False


# ---------------------------------------------------------------------------
# Elastic scaling deltas


def scale_out(plan: EmbeddingPlan, topo: PhysicalTopology, nf_name: str,
              objective: str = "min_delay") -> str:
    """Add one instance of ``nf_name`` to a committed plan; returns its id."""
    vt = plan.vt
    nf = vt.spec.nf(nf_name)
    n_after = len(vt.instances_of(nf_name)) + 1
    inst = vt.new_instance(nf, vt.spec.demand / n_after)
    new_links = vt.expand_vlinks(only_touching=inst.id)
    try:
        dist = delay_matrix(topo)
        pop_usage: dict[int, list] = {}
        _place_instances(vt, topo, objective, [inst], plan.placement, pop_usage, dist,
                         set(), {})
        routing, replicas = {}, {}
        _route_vlinks(vt, topo, new_links, plan.placement, {}, set(), set(), routing, replicas)
        topo.pops[plan.placement[inst.id]].reserve((plan.id, inst.id), inst.resources)
        reserved = []
        try:
            for vid, path in routing.items():
                for k, p in enumerate(replicas.get(vid, [path])):
                    for lid in p:
                        topo.links[lid].reserve((plan.id, vid, k), vt.vlinks[vid].bandwidth)
                        reserved.append((lid, (plan.id, vid, k)))
        except InsufficientResources:
            for lid, key in reserved:
                topo.links[lid].unreserve(key)
            topo.pops[plan.placement[inst.id]].unreserve((plan.id, inst.id))
            raise
    except (InsufficientResources, NoPath):
        plan.placement.pop(inst.id, None)
        for vl in new_links:
            vt.vlinks.pop(vl.id, None)
        vt.instances.pop(inst.id)
        raise
    plan.routing.update(routing)
    plan.replica_routing.update(replicas)
    for inst_other in vt.instances_of(nf_name):
        inst_other.demand_share = vt.spec.demand / n_after
    return inst.id


def scale_in(plan: EmbeddingPlan, topo: PhysicalTopology, instance_id: str) -> None:
    """Remove one instance (and its virtual links) from a committed plan."""
    vt = plan.vt
    inst = vt.instances[instance_id]
    if len(vt.instances_of(inst.nf.name)) <= 1:
        raise ValueError(f"cannot remove the last instance of {inst.nf.name}")
    pid = plan.placement.pop(instance_id)
    topo.pops[pid].reservations.pop((plan.id, instance_id), None)
    for vl in [v for v in vt.vlinks.values() if instance_id in (v.src, v.dst)]:
        for k, p in enumerate(plan.replica_routing.pop(vl.id, [plan.routing.get(vl.id, [])])):
            for lid in p:
                topo.links[lid].reservations.pop((plan.id, vl.id, k), None)
        plan.routing.pop(vl.id, None)
        del vt.vlinks[vl.id]
    del vt.instances[instance_id]
    remaining = vt.instances_of(inst.nf.name)
    for other in remaining:
        other.demand_share = vt.spec.demand / len(remaining)
