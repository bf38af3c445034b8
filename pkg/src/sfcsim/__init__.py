"""sfcsim: service function chains over a packet-level network simulator.

The package is organised bottom-up:

* ``model`` substrate, flow and packet types, wire format, path queries
* ``engine`` discrete-event kernel, links, queues, function hosts, reports
* ``chains`` chain specs, translation to instances, mapping, validation
* ``netfuncs`` in-network functions (AA, media, DetNet, monitoring)
* ``transport`` segment transport, Transport Assistant and Reno baseline
* ``mgmt`` signaling, controllers, monitoring and failover
* ``scenario`` / ``experiments`` / ``cli`` scenario files and batch runs
"""

from .errors import (
    InsufficientResources,
    MalformedHeader,
    NoPath,
    NotCommitted,
    ParseError,
    PastEvent,
    PresetPreconditionFailed,
    SchemaError,
    SfcSimError,
    UnknownFlow,
    UnknownTarget,
    Unrecoverable,
)
from .model import (
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
)
from .engine import FunctionHost, Network, SimulationReport, Simulator
from .chains import (
    ChainSpec,
    EmbeddingPlan,
    Endpoint,
    NfSpec,
    VLinkSpec,
    commit_plan,
    map_chain,
    release,
    translate,
    validate,
)

__version__ = "0.1.0"
