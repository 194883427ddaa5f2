"""Flow/packet fusion network intrusion detection with heterogeneous graph
attention, integrated-gradients attribution, and generative explanations."""

from .flows import (
    FLOW_FEATURE_NAMES,
    PACKET_FEATURE_NAMES,
    FlowAssembler,
    FlowKey,
    FlowRecord,
    assemble_flows,
    compute_flow_features,
    compute_packet_features,
    encode_payload,
)
from .graphs import HeteroGraph, build_graph, deserialize_graph, serialize_graph
from .model import HeteroGATClassifier
from .packets import PacketRecord, read_pcap, write_pcap
from .temporal import (
    EXTENDED_FEATURE_NAMES,
    TEMPORAL_FEATURE_NAMES,
    TemporalFeaturizer,
    TemporalState,
    extend_features,
)

__version__ = "0.1.0"

__all__ = [
    "FLOW_FEATURE_NAMES",
    "PACKET_FEATURE_NAMES",
    "EXTENDED_FEATURE_NAMES",
    "TEMPORAL_FEATURE_NAMES",
    "FlowAssembler",
    "FlowKey",
    "FlowRecord",
    "HeteroGATClassifier",
    "HeteroGraph",
    "PacketRecord",
    "TemporalFeaturizer",
    "TemporalState",
    "assemble_flows",
    "build_graph",
    "compute_flow_features",
    "compute_packet_features",
    "deserialize_graph",
    "encode_payload",
    "extend_features",
    "read_pcap",
    "serialize_graph",
    "write_pcap",
]
