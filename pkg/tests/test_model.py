import math

import networkx as nx
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles as O
from conftest import line_topology
from sfcsim.errors import MalformedHeader, NoPath
from sfcsim.model import (
    AppId,
    FlowRequirement,
    Packet,
    PacketKind,
    PhysicalLink,
    PhysicalTopology,
    Pop,
    Reliability,
    ResourceVector,
    Tlv,
    TlvKind,
    decode_packet,
    disjoint_paths,
    encode_packet,
    make_tlv,
    shortest_path,
    tlv_values,
)


# -- resources and substrate ------------------------------------------------


def test_resource_vector_rejects_negative():
    with pytest.raises(ValueError):
        ResourceVector(-1, 0, 0)


def test_pop_reserve_release_restores_residual_bitwise():
    pop = Pop(0, ResourceVector(1.0, 1.0, 1.0))
    before = pop.residual
    for i in range(10):
        pop.reserve(i, ResourceVector(0.1, 0.1, 0.1))
    for i in range(10):
        pop.unreserve(i)
    assert pop.residual == before


def test_pop_refuses_overbooking():
    pop = Pop(0, ResourceVector(4, 4, 4))
    pop.reserve("a", ResourceVector(3, 1, 1))
    with pytest.raises(Exception):
        pop.reserve("b", ResourceVector(2, 1, 1))
    assert pop.residual == ResourceVector(1, 3, 3)


def test_link_validation():
    with pytest.raises(ValueError):
        PhysicalLink(1, 0, 1, 0.0, 0.01)
    with pytest.raises(ValueError):
        PhysicalLink(1, 0, 1, 1e6, -1)
    with pytest.raises(ValueError):
        PhysicalLink(1, 0, 1, 1e6, 0.0, 1.5)


def test_topology_rejects_dangling_links():
    topo = PhysicalTopology([Pop(0, ResourceVector())])
    with pytest.raises(ValueError):
        topo.add_link(PhysicalLink(1, 0, 9, 1e6, 0.0))


# -- shortest_path --------------------------------------------------------


def _diamond():
    ids = {"A": 0, "B": 1, "C": 2, "D": 3}
    topo = PhysicalTopology([Pop(i, ResourceVector()) for i in ids.values()])
    for lid, ((a, b), d) in enumerate(O.DIAMOND_DELAYS_MS.items(), start=1):
        topo.add_link(PhysicalLink(lid, ids[a], ids[b], 1e6, d / 1000))
    return topo, ids


def test_shortest_path_line():
    topo = line_topology(3, delay=0.01)
    path = shortest_path(topo, 0, 2)
    assert path == [1, 2]
    assert topo.path_delay(path) == pytest.approx(0.02)


def test_shortest_path_identity():
    assert shortest_path(line_topology(3), 1, 1) == []


def test_shortest_path_diamond_matches_brute_force():
    topo, ids = _diamond()
    path = shortest_path(topo, ids["A"], ids["D"])
    assert topo.path_pops(0, path) == [ids[n] for n in O.DIAMOND_BEST_PATH]
    assert topo.path_delay(path) == pytest.approx(O.DIAMOND_BEST_DELAY)


def test_shortest_path_hops_metric():
    topo, ids = _diamond()
    assert len(shortest_path(topo, 0, 3, "hops")) == 2


def test_shortest_path_skips_down_links():
    topo, ids = _diamond()
    topo.links[1].up = False
    path = shortest_path(topo, 0, 3)
    assert topo.path_pops(0, path) == [0, 2, 3]
    topo.links[3].up = False
    with pytest.raises(NoPath):
        shortest_path(topo, 0, 3)


@st.composite
def random_graphs(draw):
    n = draw(st.integers(3, 7))
    edges = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1),
                                    st.integers(1, 20)), min_size=1, max_size=15))
    return n, [(a, b, w) for a, b, w in edges if a != b]


@given(random_graphs())
def test_shortest_path_delay_matches_networkx(graph):
    n, edges = graph
    topo = PhysicalTopology([Pop(i, ResourceVector()) for i in range(n)])
    g = nx.MultiGraph()
    g.add_nodes_from(range(n))
    for lid, (a, b, w) in enumerate(edges, start=1):
        topo.add_link(PhysicalLink(lid, a, b, 1e6, w / 1000))
        g.add_edge(a, b, weight=w)
    try:
        expected = nx.shortest_path_length(g, 0, n - 1, weight="weight") / 1000
    except nx.NetworkXNoPath:
        with pytest.raises(NoPath):
            shortest_path(topo, 0, n - 1)
        return
    path = shortest_path(topo, 0, n - 1)
    assert topo.path_pops(0, path)[-1] == n - 1
    assert topo.path_delay(path) == pytest.approx(expected)


# -- disjoint_paths -------------------------------------------------------


def test_disjoint_paths_diamond():
    topo, _ = _diamond()
    paths = disjoint_paths(topo, 0, 3, 2)
    assert len(paths) == 2
    assert not set(paths[0]) & set(paths[1])
    assert topo.path_delay(paths[0]) <= topo.path_delay(paths[1])


def test_disjoint_paths_bridge_limits_to_one():
    assert len(disjoint_paths(line_topology(3), 0, 2, 2)) == 1


def test_disjoint_paths_ladder_matches_max_flow():
    topo = PhysicalTopology([Pop(i, ResourceVector()) for i in range(6)])
    for lid, (a, b) in enumerate(O.LADDER_EDGES, start=1):
        delay = 0.005 if (a, b) == (1, 4) else 0.001
        topo.add_link(PhysicalLink(lid, a, b, 1e6, delay))
    paths = disjoint_paths(topo, 0, 5, 2)
    assert len(paths) == O.LADDER_MAX_FLOW
    assert not set(paths[0]) & set(paths[1])
    for p in paths:
        assert topo.path_pops(0, p)[-1] == 5


def test_disjoint_paths_no_path():
    topo = PhysicalTopology([Pop(0, ResourceVector()), Pop(1, ResourceVector())])
    with pytest.raises(NoPath):
        disjoint_paths(topo, 0, 1, 2)


# -- identifiers and requirements -----------------------------------------


@given(st.integers(0, (1 << 16) - 1), st.integers(0, (1 << 48) - 1))
def test_app_id_roundtrip(op, local):
    app = AppId(op, local)
    assert AppId.unpack(app.pack()) == app


def test_app_id_range():
    with pytest.raises(ValueError):
        AppId(1 << 16, 0)


def test_flow_requirement_invariants():
    with pytest.raises(ValueError):
        FlowRequirement(1, 1, max_e2e_delay=0.0)
    with pytest.raises(ValueError):
        FlowRequirement(1, 1, max_loss_ratio=2.0)
    req = FlowRequirement(1, 1, {2, 3}, reliability=Reliability("partial", 0.1))
    assert req.destinations == frozenset({2, 3})
    assert Reliability("partial", 0.1).wants_retransmission(0.05)
    assert not Reliability("partial", 0.1).wants_retransmission(0.2)
    assert not Reliability("none").wants_retransmission(0.0)


# -- wire format ----------------------------------------------------------


def test_encode_no_tlvs_fixed_header():
    p = Packet(AppId(1, 2), PacketKind.REGULAR, 3, 4, 100)
    data = encode_packet(p)
    assert len(data) == O.HEADER_BYTES
    assert decode_packet(data) == p


def test_encode_timestamp_tlv_length():
    p = Packet(AppId(1, 2), PacketKind.REGULAR, 3, 4, 100, [make_tlv(TlvKind.TIMESTAMP, 1.5)])
    data = encode_packet(p)
    assert len(data) == O.TIMESTAMP_PACKET_BYTES
    q = decode_packet(data)
    assert q == p
    assert tlv_values(q.tlvs[0]) == (1.5,)


def test_truncated_header():
    data = encode_packet(Packet(AppId(1, 2), PacketKind.REGULAR, 3, 4, 0))
    with pytest.raises(MalformedHeader):
        decode_packet(data[:-1])


def test_tlv_overrun():
    data = encode_packet(Packet(AppId(1, 2), PacketKind.REGULAR, 3, 4, 0,
                                [make_tlv(TlvKind.TIMESTAMP, 1.0)]))
    with pytest.raises(MalformedHeader):
        decode_packet(data[:-3])


def test_signaling_has_no_payload():
    with pytest.raises(ValueError):
        Packet(AppId(1, 1), PacketKind.SIGNALING, 0, 0, 10)


tlvs = st.lists(st.builds(Tlv, st.integers(1000, 65535), st.binary(max_size=40)), max_size=5)


@given(st.integers(0, (1 << 64) - 1), st.integers(0, (1 << 32) - 1),
       st.integers(0, (1 << 64) - 1), st.integers(0, (1 << 32) - 1), tlvs)
def test_encode_decode_roundtrip_unknown_tlvs(app, flow, seq, payload, extra):
    p = Packet(AppId.unpack(app), PacketKind.REGULAR, flow, seq, payload, extra)
    data = encode_packet(p)
    q = decode_packet(data)
    assert q == p
    assert encode_packet(q) == data


def test_known_tlv_values_roundtrip():
    t = make_tlv(TlvKind.ACK, 1, 2, 3, 40, 39, (41, 43), (45, 46))
    assert tlv_values(t) == (1, 2, 3, 40, 39, (41, 43), (45, 46))
    t = make_tlv(TlvKind.DESTINATIONS, 4, 5, 6)
    assert tlv_values(t) == (4, 5, 6)


def test_packet_size_and_copy():
    p = Packet(AppId(1, 1), PacketKind.REGULAR, 1, 1, 1000, [make_tlv(TlvKind.PRIORITY, 2)])
    assert p.size == O.HEADER_BYTES + 5 + 1000
    q = p.copy()
    q.delay_breakdown["queuing"] = 1.0
    assert p.delay_breakdown["queuing"] == 0.0
    assert p.priority == 2
    assert math.isclose(q.total_delay, 1.0)
