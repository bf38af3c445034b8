"""Scenario files: YAML in, validated and normalised Python data out.

A scenario has the sections ``topology``, ``chains``, ``traffic``,
``faults`` and ``management`` plus ``seed``, ``duration``, ``name`` and
``preset``. Structural rules live in ``scenario_schema.json``; references
between sections (POP ids, NF names, endpoints, flows) are checked here.
Every error names the file, the line and the offending field.

``load(emit(s)) == s`` holds for any loaded scenario ``s``.
"""

from __future__ import annotations

import copy
import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from .chains import ChainSpec, Endpoint, NfSpec, VLinkSpec, endpoint_node
from .errors import InvalidSpec, ParseError, SchemaError
from .model import (
    DEFAULT_QUEUE_BYTES,
    AppId,
    FlowRequirement,
    PhysicalLink,
    PhysicalTopology,
    Pop,
    Reliability,
    ResourceVector,
)


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e8``-style numbers as floats."""


_FLOAT = re.compile(
    r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+][0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""",
    re.X,
)
_Loader.add_implicit_resolver("tag:yaml.org,2002:float", _FLOAT, list("-+0123456789."))

_SCHEMA = None


def schema() -> dict:
    global _SCHEMA
    if _SCHEMA is None:
        text = resources.files("sfcsim").joinpath("scenario_schema.json").read_text()
        _SCHEMA = json.loads(text)
    return _SCHEMA


POP_DEFAULTS = {"cpu": 0.0, "memory": 0.0, "disk": 0.0}
LINK_DEFAULTS = {"loss": 0.0, "queue_bytes": DEFAULT_QUEUE_BYTES}
CHAIN_DEFAULTS = {"transport": "datagram", "transport_options": {}, "demand": 1.0,
                  "e2e_delay_bound": None, "max_packet_bytes": 1500}
NF_DEFAULTS = {"cpu": 0.0, "memory": 0.0, "disk": 0.0, "processing_delay": 0.0, "config": {},
               "allowed_pops": None, "min_instances": 1}
VLINK_DEFAULTS = {"bandwidth": 0.0, "max_delay": None}
FLOW_DEFAULTS = {"destinations": None, "start": 0.0, "stop": None, "count": None,
                 "process": "constant", "priority": 0, "reliability": "none", "deadline": 0.0,
                 "max_e2e_delay": None, "interest": {}, "drop_if_congestion": False,
                 "schedule": []}
FAILURE_DEFAULTS = {"duration": math.inf}
DROP_DEFAULTS = {"count": 1}
MGMT_DEFAULTS = {"control_rtt": 0.01, "instantiation_delay": 0.0, "failover": "none",
                 "objective": "min_delay",
                 "reactive_setup": 0.1, "monitor_period": 0.1, "monitor_start": 0.0,
                 "period_changes": []}
SCALING_DEFAULTS = {"enabled": False, "high": 0.8, "low": 0.3, "hysteresis": 3, "ewma": 0.5}


def _filled(defaults: dict, value: dict) -> dict:
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(value))
    return out


@dataclass
class Scenario:
    """A validated scenario with every optional field filled in."""

    topology: dict
    chains: list
    traffic: list = field(default_factory=list)
    faults: dict = field(default_factory=lambda: {"failures": [], "drops": []})
    management: dict = field(default_factory=lambda: _filled(MGMT_DEFAULTS, {
        "scaling": dict(SCALING_DEFAULTS)}))
    seed: int = 0
    duration: float = 1.0
    name: str = "scenario"
    preset: str = "custom"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "duration": self.duration,
            "preset": self.preset,
            "topology": copy.deepcopy(self.topology),
            "chains": copy.deepcopy(self.chains),
            "traffic": copy.deepcopy(self.traffic),
            "faults": copy.deepcopy(self.faults),
            "management": copy.deepcopy(self.management),
        }

    def chain(self, app: str) -> dict:
        for c in self.chains:
            if c["app"] == app:
                return c
        raise KeyError(app)


# ---------------------------------------------------------------------------
# Loading


class _Lines:
    """Maps a data path (keys and indices) to a 1-based source line."""

    def __init__(self, root):
        self.root = root

    def line(self, path) -> int | None:
        node = self.root
        if node is None:
            return None
        best = node.start_mark.line + 1
        for part in path:
            nxt = None
            if isinstance(node, yaml.MappingNode):
                for k, v in node.value:
                    if k.value == str(part):
                        nxt = v if not isinstance(v, yaml.ScalarNode) else v
                        best = k.start_mark.line + 1
                        break
            elif isinstance(node, yaml.SequenceNode) and isinstance(part, int):
                if 0 <= part < len(node.value):
                    nxt = node.value[part]
                    best = nxt.start_mark.line + 1
            if nxt is None:
                break
            node = nxt
        return best


def _field_name(path) -> str:
    out = ""
    for part in path:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out


def loads(text: str, path: str | None = None) -> Scenario:
    """Parse and validate scenario text."""
    try:
        root = yaml.compose(text, Loader=_Loader)
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ParseError(str(getattr(exc, "problem", exc)), line=line, path=path) from None
    lines = _Lines(root)
    if not isinstance(data, dict):
        raise SchemaError("scenario must be a mapping", line=lines.line([]), path=path)
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        loc = list(err.absolute_path)
        raise SchemaError(err.message, line=lines.line(loc), field=_field_name(loc) or None,
                          path=path)
    scn = _normalise(data)
    _check_references(scn, lines, path)
    return scn


def load(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read scenario: {exc}", path=str(path)) from None
    return loads(text, str(path))


def _normalise(data: dict) -> Scenario:
    topo = data["topology"]
    topology = {
        "queue_discipline": topo.get("queue_discipline", "fifo"),
        "pops": [_filled(POP_DEFAULTS, p) for p in topo["pops"]],
        "links": [_filled(LINK_DEFAULTS, l) for l in topo["links"]],
    }
    for p in topology["pops"]:
        for k in ("cpu", "memory", "disk"):
            p[k] = float(p[k])
    for l in topology["links"]:
        for k in ("bandwidth", "delay", "loss"):
            l[k] = float(l[k])
    chains = []
    for c in data["chains"]:
        chain = _filled(CHAIN_DEFAULTS, c)
        chain["nfs"] = [_filled(NF_DEFAULTS, nf) for nf in c["nfs"]]
        chain["vlinks"] = [_filled(VLINK_DEFAULTS, vl) for vl in c["vlinks"]]
        chain["endpoints"] = [dict(e) for e in c["endpoints"]]
        chains.append(chain)
    traffic = []
    for t in data.get("traffic", []):
        flow = _filled(FLOW_DEFAULTS, t)
        flow["schedule"] = [dict(s) for s in flow["schedule"]]
        flow["interest"] = {int(k): float(v) for k, v in flow["interest"].items()}
        traffic.append(flow)
    faults = data.get("faults", {})
    faults = {
        "failures": [_filled(FAILURE_DEFAULTS, f) for f in faults.get("failures", [])],
        "drops": [_filled(DROP_DEFAULTS, d) for d in faults.get("drops", [])],
    }
    mg = data.get("management", {})
    management = _filled(MGMT_DEFAULTS, {k: v for k, v in mg.items() if k != "scaling"})
    management["scaling"] = _filled(SCALING_DEFAULTS, mg.get("scaling", {}))
    return Scenario(
        topology=topology,
        chains=chains,
        traffic=traffic,
        faults=faults,
        management=management,
        seed=int(data.get("seed", 0)),
        duration=float(data.get("duration", 1.0)),
        name=str(data.get("name", "scenario")),
        preset=data.get("preset", "custom"),
    )


def _check_references(scn: Scenario, lines: _Lines, path) -> None:
    def fail(msg, loc):
        raise SchemaError(msg, line=lines.line(loc), field=_field_name(loc), path=path)

    pop_ids = set()
    for i, p in enumerate(scn.topology["pops"]):
        if p["id"] in pop_ids:
            fail(f"duplicate POP id {p['id']}", ["topology", "pops", i, "id"])
        pop_ids.add(p["id"])
    link_ids = set()
    for i, l in enumerate(scn.topology["links"]):
        loc = ["topology", "links", i]
        if l["id"] in link_ids:
            fail(f"duplicate link id {l['id']}", loc + ["id"])
        link_ids.add(l["id"])
        for end in ("a", "b"):
            if l[end] not in pop_ids:
                fail(f"link {l['id']} references unknown POP {l[end]}", loc + [end])
        if l["a"] == l["b"]:
            fail(f"link {l['id']} is a self-loop", loc + ["b"])
    apps = {}
    for ci, c in enumerate(scn.chains):
        loc = ["chains", ci]
        if c["app"] in apps:
            fail(f"duplicate application {c['app']}", loc + ["app"])
        apps[c["app"]] = c
        ep_ids = set()
        for ei, e in enumerate(c["endpoints"]):
            if e["id"] in ep_ids:
                fail(f"duplicate endpoint id {e['id']}", loc + ["endpoints", ei, "id"])
            ep_ids.add(e["id"])
            if e["pop"] not in pop_ids:
                fail(f"endpoint {e['id']} sits on unknown POP {e['pop']}",
                     loc + ["endpoints", ei, "pop"])
        names = {endpoint_node(e["id"]) for e in c["endpoints"]}
        for ni, nf in enumerate(c["nfs"]):
            if nf["name"] in names:
                fail(f"duplicate NF name {nf['name']!r}", loc + ["nfs", ni, "name"])
            names.add(nf["name"])
            for pid in nf["allowed_pops"] or ():
                if pid not in pop_ids:
                    fail(f"NF {nf['name']!r} allows unknown POP {pid}",
                         loc + ["nfs", ni, "allowed_pops"])
        for vi, vl in enumerate(c["vlinks"]):
            for end in ("src", "dst"):
                if vl[end] not in names:
                    fail(f"virtual link references unknown NF {vl[end]!r}",
                         loc + ["vlinks", vi, end])
        try:
            build_chain(c).validate()
        except InvalidSpec as exc:
            fail(str(exc), loc)
    flows = set()
    for ti, t in enumerate(scn.traffic):
        loc = ["traffic", ti]
        if t["flow"] in flows:
            fail(f"duplicate flow id {t['flow']}", loc + ["flow"])
        flows.add(t["flow"])
        c = apps.get(t["app"])
        if c is None:
            fail(f"flow {t['flow']} references unknown application {t['app']}", loc + ["app"])
        roles = {e["id"]: e["role"] for e in c["endpoints"]}
        if roles.get(t["source"]) != "source":
            fail(f"flow {t['flow']}: {t['source']} is not a source endpoint", loc + ["source"])
        for d in t["destinations"] or ():
            if roles.get(d) != "destination":
                fail(f"flow {t['flow']}: {d} is not a destination endpoint",
                     loc + ["destinations"])
        for d in t["interest"]:
            if roles.get(d) != "destination":
                fail(f"flow {t['flow']}: interest names non-destination {d}", loc + ["interest"])
        if t["stop"] is None and t["count"] is None:
            t["stop"] = scn.duration
    for fi, f in enumerate(scn.faults["failures"]):
        kind, _, ident = f["target"].partition(":")
        known = pop_ids if kind == "pop" else link_ids
        if int(ident) not in known:
            fail(f"failure targets unknown {kind} {ident}", ["faults", "failures", fi, "target"])
    for di, d in enumerate(scn.faults["drops"]):
        if d["link"] not in link_ids:
            fail(f"drop trace names unknown link {d['link']}", ["faults", "drops", di, "link"])
        if d["flow"] not in flows:
            fail(f"drop trace names unknown flow {d['flow']}", ["faults", "drops", di, "flow"])


# ---------------------------------------------------------------------------
# Emitting


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _drop_none(obj):
    # unset optional fields are stored as None; omitting them reloads to the same value
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_drop_none(v) for v in obj]
    return obj


def emits(scn: Scenario) -> str:
    data = _drop_none(_plain(scn.to_dict()))
    for t in data["traffic"]:
        t["interest"] = {int(k): v for k, v in t["interest"].items()}
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=None, width=100)


def emit(scn: Scenario, path) -> None:
    Path(path).write_text(emits(scn))


# ---------------------------------------------------------------------------
# Building model objects


def parse_app(text: str) -> AppId:
    op, local = text.split(":")
    return AppId(int(op), int(local))


def build_topology(scn: Scenario) -> PhysicalTopology:
    topo = PhysicalTopology()
    for p in scn.topology["pops"]:
        topo.add_pop(Pop(p["id"], ResourceVector(p["cpu"], p["memory"], p["disk"])))
    for l in scn.topology["links"]:
        topo.add_link(PhysicalLink(l["id"], l["a"], l["b"], l["bandwidth"], l["delay"],
                                   l["loss"], l["queue_bytes"]))
    return topo


def _num(v, default=math.inf):
    return default if v is None else float(v)


def build_chain(c: dict, transport: str | None = None) -> ChainSpec:
    nfs = [
        NfSpec(nf["name"], nf["kind"], float(nf["capacity"]),
               ResourceVector(nf["cpu"], nf["memory"], nf["disk"]),
               float(nf["processing_delay"]), dict(nf["config"]),
               tuple(nf["allowed_pops"]) if nf["allowed_pops"] is not None else None,
               nf["min_instances"])
        for nf in c["nfs"]
    ]
    return ChainSpec(
        parse_app(c["app"]),
        [Endpoint(e["id"], e["pop"], e["role"]) for e in c["endpoints"]],
        nfs,
        [VLinkSpec(vl["src"], vl["dst"], float(vl["bandwidth"]), _num(vl["max_delay"]))
         for vl in c["vlinks"]],
        e2e_delay_bound=_num(c["e2e_delay_bound"]),
        demand=float(c["demand"]),
        max_packet_bytes=c["max_packet_bytes"],
        transport=transport or c["transport"],
    )


def flow_requirement(t: dict, chain: dict, priority=None, reliability=None, deadline=None,
                     rate_pps=None) -> FlowRequirement:
    dests = t["destinations"]
    if dests is None:
        dests = [e["id"] for e in chain["endpoints"] if e["role"] == "destination"]
    rate = t["rate_pps"] if rate_pps is None else rate_pps
    return FlowRequirement(
        flow_id=t["flow"],
        source_osap=t["flow"],
        destinations=frozenset(dests),
        min_throughput=rate * t["packet_bytes"] * 8.0,
        max_e2e_delay=_num(t["max_e2e_delay"]),
        reliability=Reliability(reliability or t["reliability"],
                                t["deadline"] if deadline is None else deadline),
        priority=t["priority"] if priority is None else priority,
    )
