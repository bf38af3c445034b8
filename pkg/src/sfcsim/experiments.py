"""Running scenarios: traffic generation, presets, report bundles, comparison.

A run builds the substrate from a :class:`~sfcsim.scenario.Scenario`,
signals every chain to a :class:`~sfcsim.mgmt.Manager`, attaches one
traffic source per flow and executes the kernel until ``duration``.
Presets wrap one or more runs and add a summary block with the metrics
that matter for that use case.

Report bundle files (all written by :meth:`ReportBundle.write`):

``report.json``
    Everything, keys sorted, floats in ``repr`` precision.
``flows.csv``
    run, flow, destination, sent, delivered, loss_ratio, delay_mean,
    delay_p50, delay_p95, delay_p99, delay_max, propagation, transmission,
    processing, queuing, retransmission, steering, out_of_order,
    payload_mean, goodput_bps. The six component columns are mean seconds
    per delivered packet.
``recoveries.csv``
    run, flow, seq, destination, by, lost_emitted_at, retransmitted_at,
    delivered_at, recovery_delay. ``recovery_delay`` runs from the first
    emission of the lost copy to delivery of the retransmitted one.
``monitor.csv``
    run, time, target, metric, value.
``scaling.csv``
    run, app, time, kind, nf, instance, applied, note.
``failover.csv``
    run, app, target, mode, failed_at, detected_at, recovered_at, success,
    reserved_cpu_before, flow, interruption.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import scenario as scn_mod
from .engine import Network, Simulator
from .errors import PresetPreconditionFailed
from .model import (
    DELAY_COMPONENTS,
    Command,
    Packet,
    PacketKind,
    Reliability,
    TlvKind,
    disjoint_paths,
    make_tlv,
)
from .mgmt import Manager, ScalingPolicy
from .netfuncs import telemetry_records

logger = logging.getLogger(__name__)

PRESETS = ("custom", "mixed_vr_holograms", "network_assisted_transport", "detnet",
           "hp_monitoring")


# ---------------------------------------------------------------------------
# Traffic


class TrafficSource:
    """Emits one flow's packets into its source endpoint.

    Inter-arrival times are constant or exponential (``process``). The
    emission rate follows SET_RATE commands from the Application
    Assistant; ``schedule`` entries change the flow's requirement or
    enable/disable it at fixed times.
    """

    def __init__(self, sim: Simulator, net: Network, host, app, flow: dict, chain: dict, aa):
        self.sim = sim
        self.net = net
        self.host = host
        self.app = app
        self.flow = flow
        self.chain = chain
        self.aa = aa
        self.rate = float(flow["rate_pps"])
        self.seq = 0
        self.rng = sim.rng(f"traffic:{flow['flow']}")
        self._next = None

    def start(self) -> None:
        f = self.flow
        self._next = self.sim.schedule(f["start"], self._emit)
        for change in f["schedule"]:
            self.sim.schedule(change["at"], self._apply, change)

    def _done(self) -> bool:
        f = self.flow
        if f["count"] is not None and self.seq >= f["count"]:
            return True
        return f["stop"] is not None and self.sim.now >= f["stop"]

    def _emit(self) -> None:
        if self._done():
            self._next = None
            return
        f = self.flow
        p = Packet(self.app, PacketKind.REGULAR, f["flow"], self.seq, f["packet_bytes"],
                   created_at=self.sim.now)
        self.seq += 1
        self.net.record_sent(p)
        self.host.receive(p)
        gap = 1.0 / self.rate
        if f["process"] == "poisson":
            gap = float(self.rng.exponential(gap))
        self._next = self.sim.after(gap, self._emit)

    def set_rate(self, rate_pps: float) -> None:
        """New emission rate, effective from the next emission."""
        if rate_pps <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate_pps

    def on_command(self, cmd: tuple) -> None:
        code, osap, value = cmd
        if code == Command.SET_RATE and osap == self.flow["flow"]:
            bits = self.flow["packet_bytes"] * 8
            if bits > 0:
                self.set_rate(value / bits)
                logger.debug("flow %s: rate now %.3f pps", osap, self.rate)

    def _apply(self, change: dict) -> None:
        fid = self.flow["flow"]
        if "enabled" in change:
            (self.aa.enable if change["enabled"] else self.aa.disable)(fid)
        keys = ("priority", "reliability", "deadline", "rate_pps")
        if not any(k in change for k in keys):
            return
        old = self.aa.policy[fid]
        rel = Reliability(change.get("reliability", old.reliability.mode),
                          change.get("deadline", old.reliability.deadline))
        new = replace(old, priority=change.get("priority", old.priority), reliability=rel)
        if "rate_pps" in change:
            new = replace(new, min_throughput=change["rate_pps"] * self.flow["packet_bytes"] * 8.0)
        self.aa.update_context(fid, new)


def flow_rules(flow: dict) -> list:
    rules = []
    if flow["interest"]:
        rules.append(make_tlv(TlvKind.INTEREST, *sorted(flow["interest"].items())))
    if flow["drop_if_congestion"]:
        rules.append(make_tlv(TlvKind.DROP_IF_CONGESTION))
    return rules


# ---------------------------------------------------------------------------
# One run


@dataclass
class RunResult:
    label: str
    net: Network
    manager: Manager
    report: object
    sources: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"simulation": self.report.to_dict(), "management": self.manager.report()}


def simulate(scn: scn_mod.Scenario, *, label: str = "main", transport: str | None = None,
             seed: int | None = None, failover: str | None = None) -> RunResult:
    """Run one scenario; ``transport`` and ``failover`` override the file."""
    seed = scn.seed if seed is None else seed
    mg = scn.management
    sim = Simulator(seed)
    topo = scn_mod.build_topology(scn)
    discipline = scn.topology["queue_discipline"]
    net = Network(sim, topo, discipline)
    scaling = ScalingPolicy(**mg["scaling"])
    mgr = Manager(net, control_rtt=mg["control_rtt"],
                  instantiation_delay=mg["instantiation_delay"],
                  failover=failover or mg["failover"], reactive_setup=mg["reactive_setup"],
                  monitor_period=mg["monitor_period"], scaling=scaling,
                  objective=mg["objective"], queue_discipline=discipline)
    records = {}
    for chain in scn.chains:
        mode = chain["transport"]
        if transport is not None and mode != "datagram":
            mode = transport
        spec = scn_mod.build_chain(chain, mode)
        records[chain["app"]] = mgr.signal_instantiate(spec, chain["transport_options"])
    sources = {}
    for flow in scn.traffic:
        rec = records[flow["app"]]
        if rec.deployment is None:
            logger.warning("flow %s: application %s was not admitted", flow["flow"], flow["app"])
            continue
        chain = scn.chain(flow["app"])
        dep = rec.deployment
        dep.register_flow(flow["source"], scn_mod.flow_requirement(flow, chain),
                          flow_rules(flow))
        host = dep.source_host(flow["source"])
        aa = dep.aas[flow["source"]]
        src = TrafficSource(sim, net, host, rec.spec.app, flow, chain, aa)
        sources[flow["flow"]] = src
        src.start()
    for rec in records.values():
        if rec.deployment is None:
            continue
        for ep_id, aa in rec.deployment.aas.items():
            fn = rec.deployment.source_host(ep_id).function
            fn.on_command = _dispatcher(sources, ep_id, rec, scn)
            aa.control_sink = lambda msg, fn=fn: fn.on_control(msg)
    for d in scn.faults["drops"]:
        net.drop_once(d["link"], d["flow"], d["seq"], d["count"])
    for f in scn.faults["failures"]:
        net.inject_failure(f["target"], f["at"], f["duration"])
    mgr.start(mg["monitor_start"])
    for change in mg["period_changes"]:
        sim.schedule(change["at"], mgr.set_period, change["period"])
    report = net.run(scn.duration)
    mgr.finalize()
    return RunResult(label, net, mgr, report, sources)


def _dispatcher(sources, ep_id, rec, scn):
    app = str(rec.spec.app)
    mine = [src for src in sources.values()
            if src.flow["source"] == ep_id and scn_mod.parse_app(src.flow["app"]) == rec.spec.app]

    def on_command(cmd):
        for src in mine:
            src.on_command(cmd)

    on_command.app = app
    return on_command


# ---------------------------------------------------------------------------
# Report bundles


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


FLOW_COLUMNS = ["run", "flow", "destination", "sent", "delivered", "loss_ratio", "delay_mean",
                "delay_p50", "delay_p95", "delay_p99", "delay_max", *DELAY_COMPONENTS,
                "out_of_order", "payload_mean", "goodput_bps"]
RECOVERY_COLUMNS = ["run", "flow", "seq", "destination", "by", "lost_emitted_at",
                    "retransmitted_at", "delivered_at", "recovery_delay"]
MONITOR_COLUMNS = ["run", "time", "target", "metric", "value"]
SCALING_COLUMNS = ["run", "app", "time", "kind", "nf", "instance", "applied", "note"]
FAILOVER_COLUMNS = ["run", "app", "target", "mode", "failed_at", "detected_at", "recovered_at",
                    "success", "reserved_cpu_before", "flow", "interruption"]


@dataclass
class ReportBundle:
    """JSON report plus CSV tables for one experiment (one or more runs)."""

    data: dict
    tables: dict = field(default_factory=dict)

    @classmethod
    def from_runs(cls, name: str, preset: str, seed: int, runs: list[RunResult],
                  summary: dict) -> ReportBundle:
        data = {
            "scenario": name,
            "preset": preset,
            "seed": seed,
            "runs": {r.label: r.to_dict() for r in runs},
            "summary": summary,
        }
        flows, recs, mon, scal, fail = [], [], [], [], []
        for r in runs:
            rep = r.report
            for fid, f in rep.flows.items():
                sent = f["counters"].get("sent", 0)
                for dest, d in f["destinations"].items():
                    dl = d["delay"]
                    n = d["delivered"]
                    flows.append([r.label, fid, dest, sent, n, d["loss_ratio"],
                                  dl.get("mean"), dl.get("p50"), dl.get("p95"), dl.get("p99"),
                                  dl.get("max"),
                                  *(d["delay_components_mean"].get(k) for k in DELAY_COMPONENTS),
                                  d["out_of_order"], d["payload_bytes"] / n if n else None,
                                  d["goodput_bps"]])
            for x in rep.recoveries:
                recs.append([r.label, *(x[k] for k in RECOVERY_COLUMNS[1:])])
            for s in r.manager.samples:
                mon.append([r.label, s.time, s.target, s.metric, s.value])
            for app, rec in sorted(r.manager.apps.items()):
                for a in rec.scaling:
                    scal.append([r.label, str(app), a.time, a.kind, a.nf, a.instance, a.applied,
                                 a.note])
                for rr in rec.recoveries:
                    base = [r.label, str(app), rr.target, rr.mode, rr.failed_at, rr.detected_at,
                            rr.recovered_at, rr.success, rr.reserved_cpu_before]
                    if not rr.interruptions:
                        fail.append([*base, None, None])
                    for flow, gap in sorted(rr.interruptions.items()):
                        fail.append([*base, flow, gap])
        tables = {
            "flows.csv": _csv(FLOW_COLUMNS, flows),
            "recoveries.csv": _csv(RECOVERY_COLUMNS, recs),
            "monitor.csv": _csv(MONITOR_COLUMNS, mon),
            "scaling.csv": _csv(SCALING_COLUMNS, scal),
            "failover.csv": _csv(FAILOVER_COLUMNS, fail),
        }
        return cls(data, tables)

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2, default=str)

    def files(self) -> dict[str, str]:
        return {"report.json": self.to_json(), **self.tables}

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name, text in self.files().items():
            path = out / name
            path.write_text(text)
            written.append(path)
        return written

    @classmethod
    def read(cls, path) -> ReportBundle:
        """Load a bundle from its directory or its ``report.json``."""
        path = Path(path)
        if path.is_dir():
            path = path / "report.json"
        data = json.loads(path.read_text())
        tables = {}
        for p in sorted(path.parent.glob("*.csv")):
            tables[p.name] = p.read_text()
        return cls(data, tables)

    @property
    def summary(self) -> dict:
        return self.data["summary"]

    def flow(self, run: str, flow) -> dict:
        return self.data["runs"][run]["simulation"]["flows"][str(flow)]


# ---------------------------------------------------------------------------
# Presets


def _chains_with(scn, kind):
    return [c for c in scn.chains if any(nf["kind"] == kind for nf in c["nfs"])]


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise PresetPreconditionFailed(msg)


def _mean_recovery(report, flow: str):
    return report.flows[flow]["recovery_delay"].get("mean")


def _flow_ids(runs: list[RunResult]) -> list[str]:
    return sorted({f for r in runs for f in r.report.flows}, key=int)


def _summary_generic(runs: list[RunResult]) -> dict:
    out = {}
    for r in runs:
        per = {}
        for fid, f in r.report.flows.items():
            per[fid] = {
                "sent": f["counters"].get("sent", 0),
                "delivered": f["counters"].get("delivered", 0),
                "recovery_delay_mean": f["recovery_delay"].get("mean"),
                "destinations": {d: {"loss_ratio": v["loss_ratio"],
                                     "delay_mean": v["delay"].get("mean"),
                                     "out_of_order": v["out_of_order"]}
                                 for d, v in f["destinations"].items()},
            }
        out[r.label] = per
    return out


def _run_custom(scn, seed):
    return [simulate(scn, seed=seed)], {}


def _run_assisted(scn, seed):
    _require(bool(_chains_with(scn, "transport_assistant")),
             "network_assisted_transport needs a chain with a transport_assistant NF")
    _require(any(f["reliability"] != "none" for f in scn.traffic),
             "network_assisted_transport needs at least one flow with reliability")
    base = simulate(scn, label="baseline", transport="baseline", seed=seed)
    assisted = simulate(scn, label="assisted", transport="assisted", seed=seed)
    summary = {}
    for fid in _flow_ids([base, assisted]):
        b = _mean_recovery(base.report, fid) if fid in base.report.flows else None
        a = _mean_recovery(assisted.report, fid) if fid in assisted.report.flows else None
        summary[fid] = {"baseline_recovery_mean": b, "assisted_recovery_mean": a,
                        "assisted_faster": (a < b) if a is not None and b is not None else None}
    return [base, assisted], {"recovery": summary}


def _run_detnet(scn, seed):
    chains = _chains_with(scn, "prf")
    _require(bool(chains) and all(any(nf["kind"] == "pef" for nf in c["nfs"]) for c in chains),
             "detnet needs a chain with both prf and pef NFs")
    topo = scn_mod.build_topology(scn)
    for c in chains:
        k = max(int(nf["config"].get("paths", 2)) for nf in c["nfs"] if nf["kind"] == "prf")
        srcs = [e["pop"] for e in c["endpoints"] if e["role"] == "source"]
        dsts = [e["pop"] for e in c["endpoints"] if e["role"] == "destination"]
        for a in srcs:
            for b in dsts:
                n = len(disjoint_paths(topo, a, b, k)) if a != b else 0
                _require(n >= k, f"detnet needs {k} disjoint paths from POP {a} to POP {b}, "
                                 f"found {n}")
    run = simulate(scn, seed=seed)
    summary = {}
    for fid, f in run.report.flows.items():
        c = f["counters"]
        sent = c.get("sent", 0)
        for dest, d in f["destinations"].items():
            summary[f"{fid}:{dest}"] = {
                "sent": sent,
                "delivered": d["delivered"],
                "loss_ratio": d["loss_ratio"],
                "out_of_order": d["out_of_order"],
                "duplicates": c.get("duplicate", 0),
                "eliminated": c.get("eliminated", 0),
            }
    return [run], {"detnet": summary}


def _run_vr(scn, seed):
    _require(bool(_chains_with(scn, "encoder")) and bool(_chains_with(scn, "cropper")),
             "mixed_vr_holograms needs encoder and cropper NFs")
    run = simulate(scn, seed=seed)
    payload = {}
    for (flow, dest), recs in sorted(run.net.deliveries.items()):
        if recs:
            sizes = np.array([r.payload_bytes for r in recs], dtype=float)
            payload[f"{flow}:{dest}"] = {"packets": len(recs), "payload_mean": float(sizes.mean())}
    return [run], {"payload": payload}


def _run_monitoring(scn, seed):
    _require(bool(_chains_with(scn, "monitor")), "hp_monitoring needs at least one monitor NF")
    run = simulate(scn, seed=seed)
    worst = 0.0
    stamped = 0
    for recs in run.net.deliveries.values():
        for r in recs:
            hops = telemetry_records(r)
            if not hops:
                continue
            stamped += 1
            q = math.fsum(h[2] for h in hops)
            pr = math.fsum(h[3] for h in hops)
            worst = max(worst, abs(q - r.breakdown["queuing"]), abs(pr - r.breakdown["processing"]))
    reports = [s for s in run.manager.samples if s.metric.startswith("delay_report")]
    return [run], {"telemetry": {"stamped_packets": stamped, "max_hop_sum_error": worst,
                                 "reports": len(reports)}}


_RUNNERS = {
    "custom": _run_custom,
    "network_assisted_transport": _run_assisted,
    "detnet": _run_detnet,
    "mixed_vr_holograms": _run_vr,
    "hp_monitoring": _run_monitoring,
}


def run_experiment(scn: scn_mod.Scenario, preset: str | None = None,
                   seed: int | None = None) -> ReportBundle:
    """Run ``scn`` under a preset and return its report bundle."""
    preset = preset or scn.preset
    if preset not in _RUNNERS:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    seed = scn.seed if seed is None else seed
    runs, extra = _RUNNERS[preset](scn, seed)
    summary = {"flows": _summary_generic(runs), **extra}
    return ReportBundle.from_runs(scn.name, preset, seed, runs, summary)


# ---------------------------------------------------------------------------
# Comparison


COMPARED = ("delivered", "loss_ratio", "delay_mean", "delay_p95", "recovery_delay_mean",
            "goodput_bps", "out_of_order")


def _metrics(flow: dict) -> dict:
    out = {"recovery_delay_mean": flow["recovery_delay"].get("mean")}
    for dest, d in flow["destinations"].items():
        out[f"{dest}.delivered"] = d["delivered"]
        out[f"{dest}.loss_ratio"] = d["loss_ratio"]
        out[f"{dest}.delay_mean"] = d["delay"].get("mean")
        out[f"{dest}.delay_p95"] = d["delay"].get("p95")
        out[f"{dest}.goodput_bps"] = d["goodput_bps"]
        out[f"{dest}.out_of_order"] = d["out_of_order"]
    return out


def compare(a: ReportBundle | dict, b: ReportBundle | dict) -> dict:
    """Per-metric deltas ``b - a`` for every run label and flow present in both.

    A negative delay or recovery delta means ``b`` is faster. Flows present
    in only one bundle are listed under ``only_a`` / ``only_b`` together
    with a warning; metrics missing on either side get a ``None`` delta.
    """
    da = a.data if isinstance(a, ReportBundle) else a
    db = b.data if isinstance(b, ReportBundle) else b
    out = {"runs": {}, "warnings": []}
    labels_a, labels_b = set(da["runs"]), set(db["runs"])
    pairs = [(l, l) for l in sorted(labels_a & labels_b)]
    if not pairs and len(labels_a) == 1 and len(labels_b) == 1:
        pairs = [(next(iter(labels_a)), next(iter(labels_b)))]
    elif labels_a != labels_b:
        out["warnings"].append(f"run labels differ: {sorted(labels_a)} vs {sorted(labels_b)}")
    for la, lb in pairs:
        fa = da["runs"][la]["simulation"]["flows"]
        fb = db["runs"][lb]["simulation"]["flows"]
        common = sorted(set(fa) & set(fb), key=int)
        only_a = sorted(set(fa) - set(fb), key=int)
        only_b = sorted(set(fb) - set(fa), key=int)
        if only_a or only_b:
            out["warnings"].append(
                f"run {la}/{lb}: flow sets differ (only in a: {only_a}, only in b: {only_b})")
        flows = {}
        for fid in common:
            ma, mb = _metrics(fa[fid]), _metrics(fb[fid])
            deltas = {}
            for key in sorted(set(ma) | set(mb)):
                x, y = ma.get(key), mb.get(key)
                deltas[key] = (y - x) if x is not None and y is not None else None
            flows[fid] = deltas
        name = la if la == lb else f"{la}->{lb}"
        out["runs"][name] = {"flows": flows, "only_a": only_a, "only_b": only_b}
    return out


def compare_runs(bundle: ReportBundle, a: str, b: str) -> dict:
    """Deltas between two runs inside one bundle (e.g. baseline vs assisted)."""
    da = {"runs": {a: bundle.data["runs"][a]}}
    db = {"runs": {b: bundle.data["runs"][b]}}
    return compare(da, db)


__all__ = ["PRESETS", "ReportBundle", "RunResult", "TrafficSource", "compare", "compare_runs",
           "run_experiment", "simulate"]
