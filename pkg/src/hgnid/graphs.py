"""Per-flow heterogeneous graphs and their on-disk corpus format.

Each graph has one flow node (92 features), n packet nodes (1500-byte
payload encodings), n "contain" edges (flow -> packet, 4 features) and
n-1 "link" edges (packet -> next packet, inter-arrival seconds).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .flows import FlowRecord
from .temporal import EXTENDED_DIM

GRAPH_SCHEMA_VERSION = 1
_MAGIC = b"XGG1"

CONTAIN_EDGE_DIM = 4  # ip_layer_size, transport_layer_size, payload_size, direction
LINK_EDGE_DIM = 1  # inter-arrival seconds
PAYLOAD_DIM = 1500


class GraphFormatError(Exception):
    """Malformed or incompatible graph stream."""


class TruncatedStream(GraphFormatError):
    pass


class VersionMismatch(GraphFormatError):
    pass


@dataclass
class HeteroGraph:
    flow_features: np.ndarray  # (92,) float64
    packet_payloads: np.ndarray  # (n, 1500) uint8
    contain_edge_features: np.ndarray  # (n, 4) float64
    link_edge_features: np.ndarray  # (n-1, 1) float64
    label: str | None = None
    graph_id: str = ""

    @property
    def num_packets(self) -> int:
        return self.packet_payloads.shape[0]

    def contain_edges(self) -> np.ndarray:
        """(2, n) indices: flow node 0 -> packet i."""
        n = self.num_packets
        return np.stack([np.zeros(n, dtype=np.int64), np.arange(n, dtype=np.int64)])

    def link_edges(self) -> np.ndarray:
        """(2, n-1) indices: packet i -> packet i+1."""
        n = self.num_packets
        return np.stack(
            [np.arange(n - 1, dtype=np.int64), np.arange(1, n, dtype=np.int64)]
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, HeteroGraph):
            return NotImplemented
        return (
            self.label == other.label
            and self.graph_id == other.graph_id
            and np.array_equal(self.flow_features, other.flow_features)
            and np.array_equal(self.packet_payloads, other.packet_payloads)
            and np.array_equal(self.contain_edge_features, other.contain_edge_features)
            and np.array_equal(self.link_edge_features, other.link_edge_features)
        )


def build_graph(flow: FlowRecord, extended_features: np.ndarray) -> HeteroGraph:
    """Assemble the heterogeneous graph for one closed flow."""
    n = len(flow.packets)
    if n < 1:
        raise ValueError("cannot build a graph from an empty flow")
    extended_features = np.asarray(extended_features, dtype=np.float64)
    if extended_features.shape != (EXTENDED_DIM,):
        raise ValueError(f"extended features must have shape ({EXTENDED_DIM},)")

    payloads = flow.payload_matrix()
    contain = np.array(
        [
            [p.ip_layer_size, p.transport_layer_size, p.payload_size, float(p.direction)]
            for p in flow.packets
        ],
        dtype=np.float64,
    )
    deltas = np.array(
        [
            [(flow.packets[i + 1].timestamp - flow.packets[i].timestamp) / 1e6]
            for i in range(n - 1)
        ],
        dtype=np.float64,
    ).reshape(n - 1, 1)
    graph_id = (
        f"{flow.key.init_ip}:{flow.key.init_port}-{flow.key.resp_ip}:{flow.key.resp_port}"
        f"-{flow.key.protocol_code}-{flow.start_time}"
    )
    return HeteroGraph(
        flow_features=extended_features,
        packet_payloads=payloads,
        contain_edge_features=contain,
        link_edge_features=deltas,
        label=flow.label,
        graph_id=graph_id,
    )


# --- binary serialization ---


def _encode_record(g: HeteroGraph) -> bytes:
    n = g.num_packets
    label = (g.label or "").encode("utf-8")
    gid = g.graph_id.encode("utf-8")
    parts = [
        struct.pack("<BHH", 1 if g.label is not None else 0, len(label), len(gid)),
        label,
        gid,
        struct.pack("<H", n),
        np.ascontiguousarray(g.flow_features, dtype="<f8").tobytes(),
        np.ascontiguousarray(g.packet_payloads, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(g.contain_edge_features, dtype="<f8").tobytes(),
        np.ascontiguousarray(g.link_edge_features, dtype="<f8").tobytes(),
    ]
    return b"".join(parts)


def _decode_record(buf: bytes) -> HeteroGraph:
    try:
        has_label, label_len, gid_len = struct.unpack_from("<BHH", buf, 0)
        off = 5
        label = buf[off : off + label_len].decode("utf-8")
        off += label_len
        gid = buf[off : off + gid_len].decode("utf-8")
        off += gid_len
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        flow = np.frombuffer(buf, dtype="<f8", count=EXTENDED_DIM, offset=off).copy()
        off += EXTENDED_DIM * 8
        payloads = (
            np.frombuffer(buf, dtype=np.uint8, count=n * PAYLOAD_DIM, offset=off)
            .reshape(n, PAYLOAD_DIM)
            .copy()
        )
        off += n * PAYLOAD_DIM
        contain = (
            np.frombuffer(buf, dtype="<f8", count=n * CONTAIN_EDGE_DIM, offset=off)
            .reshape(n, CONTAIN_EDGE_DIM)
            .copy()
        )
        off += n * CONTAIN_EDGE_DIM * 8
        link = (
            np.frombuffer(buf, dtype="<f8", count=(n - 1) * LINK_EDGE_DIM, offset=off)
            .reshape(n - 1, LINK_EDGE_DIM)
            .copy()
        )
        off += (n - 1) * LINK_EDGE_DIM * 8
    except (struct.error, ValueError) as exc:
        raise TruncatedStream(f"graph record too short: {exc}") from exc
    if off != len(buf):
        raise GraphFormatError(f"trailing bytes in graph record: {len(buf) - off}")
    return HeteroGraph(
        flow_features=flow,
        packet_payloads=payloads,
        contain_edge_features=contain,
        link_edge_features=link,
        label=label if has_label else None,
        graph_id=gid,
    )


def serialize_graph(g: HeteroGraph) -> bytes:
    """Self-describing single-graph byte stream (magic, version, record)."""
    rec = _encode_record(g)
    return _MAGIC + struct.pack("<HI", GRAPH_SCHEMA_VERSION, len(rec)) + rec


def deserialize_graph(data: bytes) -> HeteroGraph:
    if len(data) < 10:
        raise TruncatedStream("stream shorter than graph header")
    if data[:4] != _MAGIC:
        raise GraphFormatError(f"bad magic: {data[:4]!r}")
    version, rec_len = struct.unpack_from("<HI", data, 4)
    if version != GRAPH_SCHEMA_VERSION:
        raise VersionMismatch(f"graph schema version {version}, expected {GRAPH_SCHEMA_VERSION}")
    rec = data[10 : 10 + rec_len]
    if len(rec) < rec_len:
        raise TruncatedStream(f"record length {rec_len} exceeds stream")
    return _decode_record(rec)


def write_corpus(path: str | Path, graphs: Iterable[HeteroGraph]) -> int:
    """Write a graph corpus: magic + version header, length-prefixed records."""
    count = 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<H", GRAPH_SCHEMA_VERSION))
        for g in graphs:
            rec = _encode_record(g)
            fh.write(struct.pack("<I", len(rec)))
            fh.write(rec)
            count += 1
    return count


def read_corpus(path: str | Path) -> Iterator[HeteroGraph]:
    with open(path, "rb") as fh:
        head = fh.read(6)
        if len(head) < 6 or head[:4] != _MAGIC:
            raise GraphFormatError(f"not a graph corpus: {path}")
        (version,) = struct.unpack("<H", head[4:6])
        if version != GRAPH_SCHEMA_VERSION:
            raise VersionMismatch(f"corpus version {version}, expected {GRAPH_SCHEMA_VERSION}")
        while True:
            lenb = fh.read(4)
            if not lenb:
                return
            if len(lenb) < 4:
                raise TruncatedStream("truncated record length")
            (rec_len,) = struct.unpack("<I", lenb)
            rec = fh.read(rec_len)
            if len(rec) < rec_len:
                raise TruncatedStream("truncated graph record")
            yield _decode_record(rec)


def graph_to_json(g: HeteroGraph) -> str:
    """Debug JSON export (lossless for integers, exact repr for floats)."""
    return json.dumps(
        {
            "schema_version": GRAPH_SCHEMA_VERSION,
            "graph_id": g.graph_id,
            "label": g.label,
            "flow_features": g.flow_features.tolist(),
            "packet_payloads": g.packet_payloads.tolist(),
            "contain_edge_features": g.contain_edge_features.tolist(),
            "link_edge_features": g.link_edge_features.tolist(),
        }
    )
