"""Management plane: signaling, per-application control, monitoring, failover.

The manager lives inside the simulation. Requests, activations and
recoveries are events delayed by a configurable control round trip, so the
latency of the control plane shows up in measured interruptions.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

from .chains import (
    ChainSpec,
    EmbeddingPlan,
    endpoint_node,
    instance_count,
    map_chain,
    release,
    scale_in,
    scale_out,
    translate,
)
from .engine import FunctionHost, Network
from .errors import InsufficientResources, InvalidSpec, NoPath, Unrecoverable
from .model import FlowRequirement, Packet, TlvKind, make_tlv
from .netfuncs import ApplicationAssistant, NetworkFunction, make_function
from .transport import TransportAgent, fan_out

logger = logging.getLogger(__name__)

LIFECYCLE = ("requested", "allocated", "active", "failed", "released")


# ---------------------------------------------------------------------------
# Endpoint functions


class SourceEndpoint(NetworkFunction):
    """Application Assistant plus, outside datagram mode, a transport sender."""

    kind = "application_assistant"

    def __init__(self, aa: ApplicationAssistant, transport: dict | None, destinations):
        super().__init__()
        self.aa = aa
        self.transport_config = transport
        self.destinations = tuple(destinations)
        self.agent: TransportAgent | None = None
        self.on_command = None

    def attach(self, host):
        super().attach(host)
        if self.transport_config is not None:
            self.agent = TransportAgent(host, self.transport_config, retain=True)

    def process(self, p, host):
        out = self.aa.ingress(p)
        if not out:
            host.net.drop(p, "policy")
            return []
        if self.agent is None:
            return out
        dests = p.destinations or self.destinations
        copies = fan_out(p, dests)
        if len(copies) > 1:
            host.net.count(p, "replicated", len(copies) - 1)
        for q in copies:
            self.agent.send(q, q.destinations[0])
        return []

    def on_control(self, p):
        if self.agent is not None and self.agent.on_control(p):
            return
        cmd = p.values(TlvKind.COMMAND)
        if cmd is not None and self.on_command is not None:
            self.on_command(cmd)


class SinkEndpoint(NetworkFunction):
    """Destination endpoint: acknowledges segments and records deliveries."""

    kind = "application_assistant"

    def __init__(self, endpoint_id: int, transport: dict | None):
        super().__init__()
        self.endpoint_id = endpoint_id
        self.transport_config = transport
        self.agent: TransportAgent | None = None

    def attach(self, host):
        super().attach(host)
        if self.transport_config is not None:
            self.agent = TransportAgent(host, self.transport_config)

    def process(self, p, host):
        net = host.net
        if self.agent is not None and not self.agent.receive(p):
            net.count(p, "duplicate")
            return []
        dests = p.destinations
        if dests is not None and self.endpoint_id not in dests:
            net.drop(p, "misrouted")
            return []
        net.deliver(p, self.endpoint_id)
        net.note_recovery(p, self.endpoint_id)
        return []

    def on_control(self, p):
        if self.agent is not None:
            self.agent.on_control(p)


# ---------------------------------------------------------------------------
# Deployment: a plan turned into running hosts


class Deployment:
    """Hosts for one application's endpoints and for every installed plan.

    Endpoints forward along the *current* plan; an instance forwards along
    the plan it was installed for, so packets already inside an old plan
    finish their journey there after a switchover.
    """

    def __init__(self, net: Network, spec: ChainSpec, *, transport_config: dict | None = None,
                 gate=None, queue_discipline: str = "fifo", telemetry_sink=None):
        self.net = net
        self.telemetry_sink = telemetry_sink
        self.spec = spec
        self.gate = gate
        self.queue_discipline = queue_discipline
        self.transport_config = dict(transport_config or {})
        mode = spec.transport
        agent_cfg = self.transport_config if mode != "datagram" else None
        self.current: EmbeddingPlan | None = None
        self.hosts: dict[int, dict[str, FunctionHost]] = {}
        self.plans: dict[int, EmbeddingPlan] = {}
        self.aas: dict[int, ApplicationAssistant] = {}
        self.endpoint_hosts: dict[str, FunctionHost] = {}
        self._rr = {}
        self.draining: set[str] = set()
        self._succ = OrderedDict((n, []) for n in spec.node_names())
        for vl in spec.vlinks:
            if vl.dst not in self._succ[vl.src]:
                self._succ[vl.src].append(vl.dst)
        self._dest_nodes = {e.node: e.id for e in spec.endpoints if e.role == "destination"}
        self._reach = {n: self._dests_from(n) for n in self._succ}
        prefix = f"app{spec.app}"
        for ep in spec.endpoints:
            if ep.role == "source":
                aa = ApplicationAssistant(config={"app": spec.app})
                self.aas[ep.id] = aa
                fn = SourceEndpoint(aa, agent_cfg, spec.destinations)
            else:
                fn = SinkEndpoint(ep.id, agent_cfg)
            host = FunctionHost(net, f"{prefix}/{ep.node}", ep.pop, fn, app=spec.app,
                                discipline=queue_discipline)
            host.node = ep.node
            host.plan = None
            host.gate = gate
            host.forward = self._forward
            self.endpoint_hosts[ep.node] = host

    def _dests_from(self, start):
        seen = {start}
        stack = [start]
        while stack:
            for nxt in self._succ[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return {self._dest_nodes[n] for n in seen if n in self._dest_nodes}

    # -- plan management ---------------------------------------------------
    def install(self, plan: EmbeddingPlan) -> dict[str, FunctionHost]:
        self.plans[plan.id] = plan
        hosts = self.hosts.setdefault(plan.id, {})
        for iid in plan.vt.instances:
            if iid not in hosts:
                self._make_host(plan, iid)
        return hosts

    def _make_host(self, plan: EmbeddingPlan, iid: str) -> FunctionHost:
        inst = plan.vt.instances[iid]
        nf = inst.nf
        kind = nf.kind
        config = dict(nf.config)
        if kind == "transport_assistant":
            if self.spec.transport != "assisted":
                kind = "forwarder"
            else:
                config = {**self.transport_config, **config}
                config.setdefault("fallback_destinations", tuple(self.spec.destinations))
        fn = make_function(kind, config)
        if kind == "monitor":
            fn.report_sink = self.telemetry_sink
        host = FunctionHost(
            self.net, f"app{self.spec.app}/p{plan.id}/{iid}", plan.placement[iid], fn,
            processing_delay=nf.per_packet_processing_delay,
            capacity=nf.per_instance_capacity, app=self.spec.app,
            discipline=self.queue_discipline,
        )
        host.node = iid
        host.plan = plan
        host.gate = self.gate
        host.forward = self._forward
        self.hosts[plan.id][iid] = host
        return host

    def activate(self, plan: EmbeddingPlan) -> None:
        if plan.id not in self.plans:
            self.install(plan)
        self.current = plan

    def instance_hosts(self, plan: EmbeddingPlan | None = None) -> dict[str, FunctionHost]:
        plan = plan or self.current
        return {} if plan is None else self.hosts.get(plan.id, {})

    def all_hosts(self):
        yield from self.endpoint_hosts.values()
        for hosts in self.hosts.values():
            yield from hosts.values()

    # -- forwarding --------------------------------------------------------
    def _forward(self, host: FunctionHost, p: Packet) -> None:
        plan = host.plan or self.current
        net = self.net
        if plan is None:
            net.drop(p, "unrouted")
            return
        label = plan.vt.node_label(host.node) if host.plan else host.node
        dests = p.destinations or tuple(self.spec.destinations)
        groups = OrderedDict()
        taken = set()
        for nxt in self._succ[label]:
            elig = [d for d in dests if d not in taken and d in self._reach[nxt]]
            if elig:
                groups[nxt] = elig
                taken.update(elig)
        if not groups:
            net.drop(p, "unrouted")
            return
        multi = len(groups) > 1
        if multi:
            net.count(p, "replicated", len(groups) - 1)
        for i, (nxt, ds) in enumerate(groups.items()):
            q = p if i == 0 else p.copy()
            if multi:
                q.set_tlv(make_tlv(TlvKind.DESTINATIONS, *ds))
            self._send(host, plan, nxt, ds, q)

    def _pick(self, plan: EmbeddingPlan, src: str, nxt: str, ds) -> str:
        if nxt in self.endpoint_hosts:
            return nxt
        hosts = self.hosts[plan.id]
        nodes = [n for n in plan.vt.nodes_of(nxt)
                 if n not in self.draining and n in hosts and hosts[n].alive]
        if not nodes:
            nodes = plan.vt.nodes_of(nxt)
        nf = self.spec.nf(nxt)
        if nf.kind == "transport_assistant" and self.spec.transport == "assisted":
            # segments need every packet for a destination to meet the same agent
            return nodes[ds[0] % len(nodes)]
        key = (plan.id, src, nxt)
        i = self._rr.get(key, 0)
        self._rr[key] = i + 1
        return nodes[i % len(nodes)]

    def _send(self, host, plan, nxt, ds, p):
        m = self._pick(plan, host.node, nxt, ds)
        vid = f"{host.node}>{m}"
        path = plan.routing.get(vid)
        if path is None:
            self.net.drop(p, "unrouted")
            return
        rep = p.values(TlvKind.REPLICA)
        if rep is not None and vid in plan.replica_routing:
            paths = plan.replica_routing[vid]
            path = paths[rep[0] % len(paths)]
        target = self.endpoint_hosts.get(m) or self.hosts[plan.id][m]
        self.net.send_path(p, host.pop, path, target.receive)

    # -- flows -------------------------------------------------------------
    def register_flow(self, source_endpoint: int, req: FlowRequirement, rules=None) -> None:
        aa = self.aas[source_endpoint]
        aa.policy[req.flow_id] = req
        if rules:
            aa.rules[req.flow_id] = list(rules)

    def source_host(self, endpoint_id: int) -> FunctionHost:
        return self.endpoint_hosts[endpoint_node(endpoint_id)]


# ---------------------------------------------------------------------------
# Records, samples and reports


@dataclass
class ScalingPolicy:
    high: float = 0.8
    low: float = 0.3
    hysteresis: int = 3
    ewma: float = 0.5
    enabled: bool = True


@dataclass
class ScalingAction:
    time: float
    kind: str
    nf: str
    instance: str | None = None
    applied: bool = True
    note: str = ""


@dataclass
class MonitorSample:
    time: float
    target: str
    metric: str
    value: float


@dataclass
class RecoveryReport:
    app: str
    target: str
    mode: str
    failed_at: float
    affected: bool = False
    detected_at: float | None = None
    recovered_at: float | None = None
    success: bool = True
    reserved_cpu_before: float = 0.0
    interruptions: dict = field(default_factory=dict)
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


class Controller:
    """Per-application elastic scaling policy (pure: samples in, actions out).

    Utilisation per NF is smoothed with an EWMA; ``hysteresis`` consecutive
    ticks above ``high`` add one instance, the same number below ``low``
    remove the least-loaded instance, never going under ``floors``.
    """

    def __init__(self, policy: ScalingPolicy, floors: dict[str, int]):
        self.policy = policy
        self.floors = dict(floors)
        self.util: dict[str, float] = {}
        self.high_streak: dict[str, int] = {}
        self.low_streak: dict[str, int] = {}

    def tick(self, now: float, samples: dict) -> list[ScalingAction]:
        """``samples`` maps NF name to (utilisation, {instance id: load})."""
        pol = self.policy
        actions = []
        for nf in sorted(samples):
            sample, loads = samples[nf]
            prev = self.util.get(nf)
            u = sample if prev is None else pol.ewma * sample + (1 - pol.ewma) * prev
            self.util[nf] = u
            hi = self.high_streak.get(nf, 0) + 1 if u > pol.high else 0
            lo = self.low_streak.get(nf, 0) + 1 if u < pol.low else 0
            self.high_streak[nf] = hi
            self.low_streak[nf] = lo
            if not pol.enabled:
                continue
            if hi >= pol.hysteresis:
                actions.append(ScalingAction(now, "scale_out", nf))
                self.high_streak[nf] = 0
            elif lo >= pol.hysteresis and len(loads) > self.floors.get(nf, 1):
                victim = min(sorted(loads, reverse=True), key=lambda i: loads[i])
                actions.append(ScalingAction(now, "scale_in", nf, victim))
                self.low_streak[nf] = 0
        return actions


@dataclass
class AppRecord:
    app: object
    spec: ChainSpec
    lifecycle: str = "requested"
    plan: EmbeddingPlan | None = None
    backup: EmbeddingPlan | None = None
    deployment: Deployment | None = None
    controller: Controller | None = None
    requested_at: float = 0.0
    activated_at: float | None = None
    released_at: float | None = None
    scaling: list = field(default_factory=list)
    recoveries: list = field(default_factory=list)
    alarms: list = field(default_factory=list)
    _loads: dict = field(default_factory=dict, repr=False)

    def plans(self):
        return [p for p in (self.plan, self.backup) if p is not None and p.committed]

    def reserved_cpu(self) -> float:
        return math.fsum(r.cpu for p in self.plans() for r in p.pop_demands().values())


class Manager:
    """Signaling, resource allocation, application control, monitoring, failover."""

    def __init__(self, net: Network, *, control_rtt: float = 0.01,
                 instantiation_delay: float = 0.0, failover: str = "none",
                 reactive_setup: float = 0.1, monitor_period: float = 0.1,
                 scaling: ScalingPolicy | None = None, objective: str = "min_delay",
                 queue_discipline: str = "fifo"):
        if failover not in ("none", "proactive", "reactive"):
            raise ValueError(f"unknown failover mode {failover!r}")
        self.net = net
        self.sim = net.sim
        self.topo = net.topo
        self.control_rtt = control_rtt
        self.instantiation_delay = instantiation_delay
        self.failover_mode = failover
        self.reactive_setup = reactive_setup
        self.monitor_period = monitor_period
        self.scaling = scaling or ScalingPolicy(enabled=False)
        self.objective = objective
        self.queue_discipline = queue_discipline
        self.apps: dict = {}
        self.samples: list[MonitorSample] = []
        self._monitor_ev = None
        self._last_tx: dict = {}
        self._last_arrivals: dict = {}
        self._last_delivered: dict = {}
        net.failure_listeners.append(self._on_failure)

    # -- signaling ---------------------------------------------------------
    def signal_instantiate(self, spec: ChainSpec, transport_config: dict | None = None
                           ) -> AppRecord:
        """Create the controller, allocate resources, schedule activation.

        Allocation is atomic: on InsufficientResources the record is failed
        and nothing stays reserved.
        """
        if spec.app in self.apps:
            raise InvalidSpec(f"application {spec.app} is already registered")
        spec.validate()
        rec = AppRecord(spec.app, spec, requested_at=self.sim.now)
        self.apps[spec.app] = rec
        try:
            vt = translate(spec)
            rec.plan = map_chain(vt, self.topo, self.objective)
        except (InsufficientResources, NoPath) as exc:
            rec.lifecycle = "failed"
            rec.alarms.append({"time": self.sim.now, "alarm": "allocation_failed",
                               "detail": str(exc)})
            logger.info("app %s: allocation failed: %s", spec.app, exc)
            return rec
        rec.lifecycle = "allocated"
        floors = {nf.name: instance_count(spec.demand, nf.per_instance_capacity,
                                          nf.min_instances) for nf in spec.nfs}
        rec.controller = Controller(self.scaling, floors)
        rec.deployment = Deployment(
            self.net, spec, transport_config=transport_config,
            gate=lambda p, rec=rec: rec.lifecycle == "active",
            queue_discipline=self.queue_discipline, telemetry_sink=self.telemetry_sink,
        )
        rec.deployment.activate(rec.plan)
        if self.failover_mode == "proactive":
            self._provision_backup(rec)
        delay = self.control_rtt + self.instantiation_delay
        if delay > 0:
            self.sim.after(delay, self._activate, rec)
        else:
            self._activate(rec)
        return rec

    def _activate(self, rec: AppRecord) -> None:
        if rec.lifecycle != "allocated":
            return
        rec.lifecycle = "active"
        rec.activated_at = self.sim.now
        self.net.event_log.append({"time": self.sim.now, "event": "active",
                                   "target": f"app:{rec.app}"})

    def release_app(self, app) -> None:
        rec = self.apps[app]
        for plan in rec.plans():
            release(plan, self.topo)
        rec.lifecycle = "released"
        rec.released_at = self.sim.now

    def _provision_backup(self, rec: AppRecord) -> None:
        primary = rec.plan
        ep_pops = {e.pop for e in rec.spec.endpoints}
        avoid = primary.hosting_pops() - ep_pops
        vt = translate(rec.spec)
        anti = {iid: {primary.placement[iid]} for iid in vt.instances if iid in primary.placement}
        attempts = [
            dict(exclude_pops=avoid, exclude_links=primary.used_links(), anti_affinity=anti),
            dict(anti_affinity=anti, exclude_links=primary.used_links()),
            dict(anti_affinity=anti),
        ]
        for kw in attempts:
            try:
                rec.backup = map_chain(translate(rec.spec), self.topo, self.objective, **kw)
                break
            except (InsufficientResources, NoPath):
                continue
        if rec.backup is None:
            rec.alarms.append({"time": self.sim.now, "alarm": "no_backup"})
            return
        rec.deployment.install(rec.backup)

    # -- monitoring and control -------------------------------------------
    def start(self, at: float = 0.0) -> None:
        """Begin periodic collection (and controller ticks) at ``at``."""
        self._monitor_ev = self.sim.schedule(max(at, self.sim.now) + self.monitor_period,
                                             self._tick)

    def set_period(self, period: float) -> None:
        """New collection period, effective from the next sample boundary."""
        if period <= 0:
            raise ValueError("monitor period must be positive")
        self.monitor_period = period

    def _tick(self) -> None:
        now = self.sim.now
        self.collect(now)
        for rec in self.apps.values():
            if rec.lifecycle == "active":
                for action in self.controller_tick(rec, self._nf_samples(rec)):
                    self._apply(rec, action)
        self._monitor_ev = self.sim.after(self.monitor_period, self._tick)

    def collect(self, now: float) -> list[MonitorSample]:
        """One round of samples over links, POPs, instances and flows."""
        out = []
        period = self.monitor_period
        for (lid, src), port in sorted(self.net.ports.items()):
            prev = self._last_tx.get((lid, src), (0, now - period))
            elapsed = now - prev[1]
            util = (port.tx_bytes - prev[0]) * 8.0 / (port.link.bandwidth * elapsed) \
                if elapsed > 0 else 0.0
            self._last_tx[(lid, src)] = (port.tx_bytes, now)
            out.append(MonitorSample(now, f"link:{lid}:{src}->{port.dst}", "utilization", util))
        for pid, pop in sorted(self.topo.pops.items()):
            cap = pop.capacity.cpu
            out.append(MonitorSample(now, f"pop:{pid}", "cpu_reserved",
                                     pop.reserved.cpu / cap if cap else 0.0))
        for rec in self.apps.values():
            if rec.deployment is None:
                continue
            loads = {}
            for plan_id, hosts in sorted(rec.deployment.hosts.items()):
                for iid, h in sorted(hosts.items()):
                    key = h.name
                    prev = self._last_arrivals.get(key, (0, now - period))
                    elapsed = now - prev[1]
                    rate = (h.arrivals - prev[0]) / elapsed if elapsed > 0 else 0.0
                    self._last_arrivals[key] = (h.arrivals, now)
                    loads[(plan_id, iid)] = rate
                    out.append(MonitorSample(now, f"instance:{h.name}", "arrival_rate", rate))
                    out.append(MonitorSample(now, f"instance:{h.name}", "queue_len",
                                             float(len(h.queue))))
            rec._loads = loads
        for flow in sorted(self.net.counters):
            delivered = self.net.counters[flow].get("delivered", 0)
            out.append(MonitorSample(now, f"flow:{flow}", "delivered", float(delivered)))
        self.samples.extend(out)
        return out

    def telemetry_sink(self, msg, report: dict, host) -> None:
        """Receives threshold reports from monitor functions."""
        self.samples.append(MonitorSample(report["time"], f"flow:{report['flow']}",
                                          f"delay_report_hop{report['hop']}", report["delay"]))

    def _nf_samples(self, rec: AppRecord) -> dict:
        plan = rec.plan
        out = {}
        for nf in rec.spec.nfs:
            loads = {iid: rec._loads.get((plan.id, iid), 0.0)
                     for iid in plan.vt.nodes_of(nf.name)
                     if iid not in rec.deployment.draining}
            if not loads:
                continue
            util = math.fsum(loads.values()) / (len(loads) * nf.per_instance_capacity)
            out[nf.name] = (util, loads)
        return out

    def controller_tick(self, rec: AppRecord, samples: dict) -> list[ScalingAction]:
        if rec.lifecycle != "active" or rec.controller is None:
            return []
        return rec.controller.tick(self.sim.now, samples)

    def _apply(self, rec: AppRecord, action: ScalingAction) -> None:
        plan = rec.plan
        dep = rec.deployment
        if action.kind == "scale_out":
            try:
                action.instance = scale_out(plan, self.topo, action.nf, self.objective)
            except (InsufficientResources, NoPath) as exc:
                action.applied = False
                action.note = str(exc)
                rec.alarms.append({"time": self.sim.now, "alarm": "scaling_deferred",
                                   "detail": str(exc)})
            else:
                dep._make_host(plan, action.instance)
        else:
            dep.draining.add(action.instance)
            self.sim.after(self._grace(plan, action.instance), self._drain, rec, action)
        rec.scaling.append(action)
        self.net.event_log.append({"time": self.sim.now, "event": action.kind,
                                   "target": f"{action.nf}:{action.instance}"})

    def _grace(self, plan, iid) -> float:
        paths = [plan.routing.get(vl.id, []) for vl in plan.vt.in_links(iid)]
        return 2 * max((self.topo.path_delay(p) for p in paths), default=0.0) + 1e-3

    def _drain(self, rec: AppRecord, action: ScalingAction) -> None:
        host = rec.deployment.hosts[rec.plan.id].get(action.instance)
        if host is not None and not host.idle:
            self.sim.after(self._grace(rec.plan, action.instance), self._drain, rec, action)
            return
        scale_in(rec.plan, self.topo, action.instance)
        rec.deployment.draining.discard(action.instance)
        if host is not None:
            host.gate = lambda p: False
            rec.deployment.hosts[rec.plan.id].pop(action.instance, None)

    def instance_counts(self, app) -> dict[str, int]:
        rec = self.apps[app]
        return {nf.name: sum(1 for i in rec.plan.vt.nodes_of(nf.name)
                             if i not in rec.deployment.draining)
                for nf in rec.spec.nfs}

    def samples_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "target", "metric", "value"])
        for s in self.samples:
            w.writerow([repr(s.time), s.target, s.metric, repr(s.value)])
        return buf.getvalue()

    # -- failures ----------------------------------------------------------
    def _on_failure(self, kind: str, ident: int, up: bool) -> None:
        if up:
            return
        target = f"{kind}:{ident}"
        for rec in list(self.apps.values()):
            if rec.lifecycle not in ("active", "allocated"):
                continue
            report = RecoveryReport(str(rec.app), target, self.failover_mode, self.sim.now,
                                    reserved_cpu_before=rec.reserved_cpu())
            rec.recoveries.append(report)
            if not self._affects(rec, kind, ident):
                continue
            report.affected = True
            if self.failover_mode == "none":
                report.success = False
                report.note = "no failover configured"
                continue
            detect = self.control_rtt / 2
            self.sim.after(detect, self._detected, rec, report, kind, ident)

    def _affects(self, rec, kind, ident) -> bool:
        if rec.plan is None:
            return False
        if kind == "pop" and ident in {e.pop for e in rec.spec.endpoints}:
            return True
        return self._affects_plan(rec.plan, kind, ident)

    def _detected(self, rec, report, kind, ident) -> None:
        report.detected_at = self.sim.now
        try:
            self.failover(rec, (kind, ident), report.mode, report)
        except Unrecoverable as exc:
            report.success = False
            report.note = str(exc)
            rec.lifecycle = "failed"

    def failover(self, rec: AppRecord, failed, mode: str, report: RecoveryReport | None = None
                 ) -> RecoveryReport:
        """Recover ``rec`` from the failure of ``failed`` (kind, id)."""
        kind, ident = failed
        if report is None:
            report = RecoveryReport(str(rec.app), f"{kind}:{ident}", mode, self.sim.now,
                                    reserved_cpu_before=rec.reserved_cpu())
            rec.recoveries.append(report)
            report.affected = self._affects(rec, kind, ident)
            if not report.affected:
                return report
        ep_pops = {e.pop for e in rec.spec.endpoints}
        if kind == "pop" and ident in ep_pops:
            raise Unrecoverable(f"endpoint POP {ident} failed")
        backup_ok = rec.backup is not None and not self._affects_plan(rec.backup, kind, ident)
        if mode == "proactive" and backup_ok:
            self.sim.after(self.control_rtt, self._switch, rec, report)
            return report
        old = rec.plan
        if old.committed:
            release(old, self.topo)
        try:
            new = map_chain(translate(rec.spec), self.topo, self.objective)
        except (InsufficientResources, NoPath) as exc:
            raise Unrecoverable(f"no feasible remap: {exc}") from None
        rec.plan = new
        rec.deployment.install(new)
        ready = 2 * self.control_rtt + self.reactive_setup
        self.sim.after(ready, self._switch_to, rec, report, new)
        return report

    @staticmethod
    def _affects_plan(plan, kind, ident) -> bool:
        if kind == "pop":
            return ident in plan.hosting_pops()
        return ident in plan.used_links()

    def _switch(self, rec: AppRecord, report: RecoveryReport) -> None:
        old = rec.plan
        rec.plan, rec.backup = rec.backup, None
        if old.committed:
            release(old, self.topo)
        self._switch_to(rec, report, rec.plan)

    def _switch_to(self, rec, report, plan) -> None:
        rec.deployment.activate(plan)
        report.recovered_at = self.sim.now
        self.net.event_log.append({"time": self.sim.now, "event": "switchover",
                                   "target": f"app:{rec.app}"})

    def finalize(self) -> None:
        """Fill in per-flow interruption intervals from delivery records."""
        for rec in self.apps.values():
            dests = set(rec.spec.destinations)
            for report in rec.recoveries:
                if not report.affected:
                    continue
                gaps = {}
                for (flow, dest), recs in sorted(self.net.deliveries.items()):
                    if dest not in dests:
                        continue
                    times = sorted(r.time for r in recs)
                    before = [t for t in times if t <= report.failed_at]
                    after = [t for t in times if t > report.failed_at]
                    if not before:
                        continue
                    seq = [before[-1], *after]
                    gap = max((b - a for a, b in zip(seq, seq[1:])), default=math.inf)
                    if not after:
                        gap = math.inf
                    gaps[str(flow)] = max(gaps.get(str(flow), 0.0), gap)
                report.interruptions = gaps

    def report(self) -> dict:
        out = {}
        for app, rec in sorted(self.apps.items()):
            out[str(app)] = {
                "lifecycle": rec.lifecycle,
                "requested_at": rec.requested_at,
                "activated_at": rec.activated_at,
                "plan": rec.plan.to_dict() if rec.plan is not None else None,
                "backup": rec.backup.to_dict() if rec.backup is not None else None,
                "reserved_cpu": rec.reserved_cpu(),
                "scaling": [asdict(a) for a in rec.scaling],
                "recoveries": [r.to_dict() for r in rec.recoveries],
                "alarms": rec.alarms,
            }
        return out
