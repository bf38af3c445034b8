import math

import pytest
import yaml

from sfcsim.chains import ChainSpec, Endpoint, NfSpec, VLinkSpec
from sfcsim.engine import Network, Simulator
from sfcsim.model import AppId, PhysicalLink, PhysicalTopology, Pop, ResourceVector
from sfcsim.scenario import loads


def line_topology(n, delay=0.01, bandwidth=1e8, cpu=10.0, delays=None, bandwidths=None,
                  loss=0.0):
    """POPs 0..n-1 in a line; link i joins POP i-1 and POP i."""
    pops = [Pop(i, ResourceVector(cpu, cpu, cpu)) for i in range(n)]
    links = []
    for i in range(1, n):
        d = delays[i - 1] if delays else delay
        bw = bandwidths[i - 1] if bandwidths else bandwidth
        links.append(PhysicalLink(i, i - 1, i, bw, d, loss))
    return PhysicalTopology(pops, links)


def diamond_topology(delays=(0.001, 0.001, 0.005, 0.005), bandwidth=1e8, loss=(0, 0, 0, 0),
                     cpu=10.0):
    """POP 0 to POP 3 via POP 1 (links 1, 2) or via POP 2 (links 3, 4)."""
    pops = [Pop(i, ResourceVector(cpu, cpu, cpu)) for i in range(4)]
    ends = [(0, 1), (1, 3), (0, 2), (2, 3)]
    links = [PhysicalLink(i + 1, a, b, bandwidth, delays[i], loss[i])
             for i, (a, b) in enumerate(ends)]
    return PhysicalTopology(pops, links)


def network(topo, seed=0, discipline="fifo"):
    return Network(Simulator(seed), topo, discipline)


def simple_chain(nfs, src_pop=0, dst_pop=None, app=AppId(1, 1), transport="datagram",
                 demand=1.0, bound=math.inf, bandwidth=1e5):
    """ep1 -> nf1 -> ... -> ep2 from (name, kind, kwargs) tuples."""
    specs = []
    for name, kind, kw in nfs:
        kw = dict(kw)
        specs.append(NfSpec(name, kind, kw.pop("capacity", 1e6),
                            kw.pop("resources", ResourceVector(1, 1, 1)), **kw))
    names = ["ep1", *[s.name for s in specs], "ep2"]
    vlinks = [VLinkSpec(a, b, bandwidth) for a, b in zip(names, names[1:])]
    eps = [Endpoint(1, src_pop, "source"), Endpoint(2, dst_pop, "destination")]
    return ChainSpec(app, eps, specs, vlinks, e2e_delay_bound=bound, demand=demand,
                     transport=transport)


def scenario_text(data: dict) -> str:
    return yaml.safe_dump(data, sort_keys=False)


def scenario(data: dict):
    return loads(scenario_text(data))


def minimal_scenario_dict():
    return {
        "name": "minimal",
        "seed": 1,
        "duration": 1.0,
        "topology": {
            "pops": [{"id": 0, "cpu": 4}, {"id": 1, "cpu": 4}],
            "links": [{"id": 1, "a": 0, "b": 1, "bandwidth": 1e7, "delay": 0.005}],
        },
        "chains": [{
            "app": "1:1",
            "endpoints": [{"id": 1, "pop": 0, "role": "source"},
                          {"id": 2, "pop": 1, "role": "destination"}],
            "nfs": [{"name": "fw", "kind": "forwarder", "capacity": 1000, "cpu": 1}],
            "vlinks": [{"src": "ep1", "dst": "fw", "bandwidth": 1e5},
                       {"src": "fw", "dst": "ep2", "bandwidth": 1e5}],
        }],
        "traffic": [{"flow": 1, "app": "1:1", "source": 1, "rate_pps": 100,
                     "packet_bytes": 500, "stop": 0.5}],
    }


@pytest.fixture
def minimal():
    return minimal_scenario_dict()


# One line per acceptance criterion, filled in by test_acceptance.py.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
