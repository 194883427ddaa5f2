"""Flow assembly and flow/packet feature vectors.

Packets sharing a canonical bidirectional 5-tuple are grouped into flows
bounded by a packet cap (default 20) and an idle timeout (default 120 s).
Each closed flow carries a 76-entry feature vector; each packet maps to a
1500-byte payload encoding plus 14 scalar features. Feature order is fixed
by FEATURE_SCHEMA_VERSION and embedded in every output file.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .packets import Direction, PacketRecord, Protocol, TcpFlags

FEATURE_SCHEMA_VERSION = "hgnid-features-1"

PAYLOAD_DIM = 1500
DEFAULT_MAX_PACKETS = 20
DEFAULT_IDLE_TIMEOUT_S = 120.0

_FLAG_ORDER = [TcpFlags.SYN, TcpFlags.ACK, TcpFlags.FIN, TcpFlags.RST, TcpFlags.PSH, TcpFlags.URG]
_FLAG_NAMES = ["syn", "ack", "fin", "rst", "psh", "urg"]


def _stat_names(prefix: str) -> list[str]:
    return [f"{prefix}_{s}" for s in ("min", "max", "mean", "std")]


FLOW_FEATURE_NAMES: list[str] = (
    ["protocol", "src_port", "dst_port", "duration_s"]
    + ["total_packets", "fwd_packets", "bwd_packets"]
    + ["total_bytes", "fwd_bytes", "bwd_bytes"]
    + ["total_payload_bytes", "fwd_payload_bytes", "bwd_payload_bytes"]
    + ["packets_per_s", "bytes_per_s", "fwd_packets_per_s",
       "bwd_packets_per_s", "fwd_bytes_per_s", "bwd_bytes_per_s"]
    + _stat_names("pkt_size") + _stat_names("fwd_pkt_size") + _stat_names("bwd_pkt_size")
    + _stat_names("payload_size") + _stat_names("fwd_payload_size") + _stat_names("bwd_payload_size")
    + _stat_names("iat") + _stat_names("fwd_iat") + _stat_names("bwd_iat")
    + [f"{n}_count" for n in _FLAG_NAMES]
    + [f"fwd_{n}_count" for n in _FLAG_NAMES]
    + [f"bwd_{n}_count" for n in _FLAG_NAMES]
    + ["fwd_header_size_mean", "bwd_header_size_mean", "down_up_ratio"]
)
assert len(FLOW_FEATURE_NAMES) == 76

PACKET_FEATURE_NAMES: list[str] = (
    ["direction", "ip_layer_size", "transport_layer_size", "payload_size", "inter_arrival_s"]
    + [f"flag_{n}" for n in _FLAG_NAMES]
    + ["is_tcp", "is_udp", "is_icmp"]
)
assert len(PACKET_FEATURE_NAMES) == 14


@dataclass(frozen=True)
class FlowKey:
    """Canonical bidirectional 5-tuple; the initiator endpoint comes first."""

    init_ip: str
    init_port: int
    resp_ip: str
    resp_port: int
    protocol_code: int

    @staticmethod
    def from_first_packet(pkt: PacketRecord) -> "FlowKey":
        return FlowKey(pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port, pkt.protocol_code)

    def table_key(self) -> tuple:
        a = (self.init_ip, self.init_port)
        b = (self.resp_ip, self.resp_port)
        return (min(a, b), max(a, b), self.protocol_code)

    def direction_of(self, pkt: PacketRecord) -> Direction:
        if (pkt.src_ip, pkt.src_port) == (self.init_ip, self.init_port):
            return Direction.FORWARD
        return Direction.BACKWARD


def packet_table_key(pkt: PacketRecord) -> tuple:
    a = (pkt.src_ip, pkt.src_port)
    b = (pkt.dst_ip, pkt.dst_port)
    return (min(a, b), max(a, b), pkt.protocol_code)


@dataclass
class FlowRecord:
    key: FlowKey
    packets: list[PacketRecord]
    flow_features: np.ndarray  # (76,) float64
    label: str | None = None
    src_mac: str = ""
    dst_mac: str = ""

    @property
    def start_time(self) -> int:
        return self.packets[0].timestamp

    @property
    def end_time(self) -> int:
        return self.packets[-1].timestamp

    @property
    def duration_s(self) -> float:
        return (self.end_time - self.start_time) / 1e6

    def payload_matrix(self) -> np.ndarray:
        """n x 1500 uint8 matrix of encoded payloads."""
        return np.stack([encode_payload(p.payload) for p in self.packets])


def encode_payload(payload: bytes) -> np.ndarray:
    """Encode payload bytes as a fixed 1500-entry vector in [0, 255].

    Longer payloads are truncated at 1500 bytes; shorter ones are
    zero-padded on the right.
    """
    out = np.zeros(PAYLOAD_DIM, dtype=np.uint8)
    clip = payload[:PAYLOAD_DIM]
    out[: len(clip)] = np.frombuffer(clip, dtype=np.uint8)
    return out


def _stats(values: np.ndarray) -> list[float]:
    # degenerate inputs (empty, single sample) produce zeros
    if values.size == 0:
        return [0.0, 0.0, 0.0, 0.0]
    std = float(values.std()) if values.size > 1 else 0.0
    return [float(values.min()), float(values.max()), float(values.mean()), std]


def _iat(ts: np.ndarray) -> np.ndarray:
    if ts.size < 2:
        return np.empty(0)
    return np.diff(ts) / 1e6


def compute_flow_features(packets: list[PacketRecord], key: FlowKey) -> np.ndarray:
    """76-entry flow feature vector; see FLOW_FEATURE_NAMES for the order."""
    if not packets:
        raise ValueError("flow must contain at least one packet")
    fwd = [p for p in packets if key.direction_of(p) == Direction.FORWARD]
    bwd = [p for p in packets if key.direction_of(p) == Direction.BACKWARD]

    ts = np.array([p.timestamp for p in packets], dtype=np.float64)
    sizes = np.array([p.ip_layer_size for p in packets], dtype=np.float64)
    psize = np.array([p.payload_size for p in packets], dtype=np.float64)
    fwd_ts = np.array([p.timestamp for p in fwd], dtype=np.float64)
    bwd_ts = np.array([p.timestamp for p in bwd], dtype=np.float64)
    fwd_sizes = np.array([p.ip_layer_size for p in fwd], dtype=np.float64)
    bwd_sizes = np.array([p.ip_layer_size for p in bwd], dtype=np.float64)
    fwd_psize = np.array([p.payload_size for p in fwd], dtype=np.float64)
    bwd_psize = np.array([p.payload_size for p in bwd], dtype=np.float64)

    duration = float(ts[-1] - ts[0]) / 1e6

    def rate(count: float) -> float:
        return count / duration if duration > 0 else 0.0

    feats: list[float] = [
        float(key.protocol_code), float(key.init_port), float(key.resp_port), duration,
        float(len(packets)), float(len(fwd)), float(len(bwd)),
        float(sizes.sum()), float(fwd_sizes.sum()), float(bwd_sizes.sum()),
        float(psize.sum()), float(fwd_psize.sum()), float(bwd_psize.sum()),
        rate(len(packets)), rate(float(sizes.sum())), rate(len(fwd)),
        rate(len(bwd)), rate(float(fwd_sizes.sum())), rate(float(bwd_sizes.sum())),
    ]
    feats += _stats(sizes) + _stats(fwd_sizes) + _stats(bwd_sizes)
    feats += _stats(psize) + _stats(fwd_psize) + _stats(bwd_psize)
    feats += _stats(_iat(ts)) + _stats(_iat(fwd_ts)) + _stats(_iat(bwd_ts))

    for group in (packets, fwd, bwd):
        for flag in _FLAG_ORDER:
            feats.append(float(sum(1 for p in group if p.has_flag(flag))))

    fwd_hdr = np.array([p.transport_layer_size for p in fwd], dtype=np.float64)
    bwd_hdr = np.array([p.transport_layer_size for p in bwd], dtype=np.float64)
    feats.append(float(fwd_hdr.mean()) if fwd_hdr.size else 0.0)
    feats.append(float(bwd_hdr.mean()) if bwd_hdr.size else 0.0)
    feats.append(len(bwd) / len(fwd) if fwd else 0.0)

    vec = np.array(feats, dtype=np.float64)
    assert vec.shape == (76,)
    return vec


@dataclass
class PacketNodeFeatures:
    payload: np.ndarray  # (1500,) uint8
    scalars: np.ndarray  # (14,) float64


def compute_packet_features(
    packet: PacketRecord, prev_timestamp: int | None = None
) -> PacketNodeFeatures:
    """Packet node features: encoded payload + the 14 scalar features."""
    delta = 0.0
    if prev_timestamp is not None:
        delta = max(packet.timestamp - prev_timestamp, 0) / 1e6
    scalars = [
        float(packet.direction),
        float(packet.ip_layer_size),
        float(packet.transport_layer_size),
        float(packet.payload_size),
        delta,
    ]
    scalars += [1.0 if packet.has_flag(f) else 0.0 for f in _FLAG_ORDER]
    scalars += [
        1.0 if packet.protocol is Protocol.TCP else 0.0,
        1.0 if packet.protocol is Protocol.UDP else 0.0,
        1.0 if packet.protocol is Protocol.ICMP else 0.0,
    ]
    return PacketNodeFeatures(
        payload=encode_payload(packet.payload),
        scalars=np.array(scalars, dtype=np.float64),
    )


class FlowAssembler:
    """Single-writer flow table turning a packet stream into FlowRecords.

    A flow closes when it reaches ``max_packets``, when it sits idle for
    ``idle_timeout_s``, or at end of stream. The next packet with the same
    key opens a fresh flow.
    """

    def __init__(
        self,
        max_packets: int = DEFAULT_MAX_PACKETS,
        idle_timeout_s: float = DEFAULT_IDLE_TIMEOUT_S,
        reorder_window_ms: float = 0.0,
    ):
        if max_packets < 1:
            raise ValueError("max_packets must be >= 1")
        self.max_packets = max_packets
        self.idle_timeout_us = int(idle_timeout_s * 1e6)
        self.reorder_window_us = int(reorder_window_ms * 1e3)
        self._table: dict[tuple, _OpenFlow] = {}

    def process(self, pkt: PacketRecord) -> Iterator[FlowRecord]:
        tkey = packet_table_key(pkt)
        open_flow = self._table.get(tkey)
        if open_flow is not None and pkt.timestamp - open_flow.last_ts >= self.idle_timeout_us:
            yield self._close(tkey)
            open_flow = None
        if open_flow is None:
            open_flow = _OpenFlow(FlowKey.from_first_packet(pkt))
            self._table[tkey] = open_flow
        pkt.direction = open_flow.key.direction_of(pkt)
        open_flow.packets.append(pkt)
        open_flow.last_ts = max(open_flow.last_ts, pkt.timestamp)
        if len(open_flow.packets) >= self.max_packets:
            yield self._close(tkey)

    def flush_idle(self, now_us: int) -> Iterator[FlowRecord]:
        stale = [k for k, f in self._table.items() if now_us - f.last_ts >= self.idle_timeout_us]
        for k in stale:
            yield self._close(k)

    def close_all(self) -> Iterator[FlowRecord]:
        for k in list(self._table):
            yield self._close(k)

    def _close(self, tkey: tuple) -> FlowRecord:
        open_flow = self._table.pop(tkey)
        pkts = sorted(open_flow.packets, key=lambda p: p.timestamp)
        first = pkts[0]
        return FlowRecord(
            key=open_flow.key,
            packets=pkts,
            flow_features=compute_flow_features(pkts, open_flow.key),
            src_mac=first.src_mac,
            dst_mac=first.dst_mac,
        )


@dataclass
class _OpenFlow:
    key: FlowKey
    packets: list[PacketRecord] = field(default_factory=list)
    last_ts: int = 0


def assemble_flows(
    packets: Iterable[PacketRecord],
    max_packets: int = DEFAULT_MAX_PACKETS,
    idle_timeout_s: float = DEFAULT_IDLE_TIMEOUT_S,
) -> Iterator[FlowRecord]:
    asm = FlowAssembler(max_packets=max_packets, idle_timeout_s=idle_timeout_s)
    for pkt in packets:
        yield from asm.process(pkt)
    yield from asm.close_all()


# --- flow record (de)serialization: JSON lines ---


def flow_to_dict(flow: FlowRecord) -> dict:
    return {
        "key": {
            "init_ip": flow.key.init_ip,
            "init_port": flow.key.init_port,
            "resp_ip": flow.key.resp_ip,
            "resp_port": flow.key.resp_port,
            "protocol_code": flow.key.protocol_code,
        },
        "src_mac": flow.src_mac,
        "dst_mac": flow.dst_mac,
        "label": flow.label,
        "flow_features": flow.flow_features.tolist(),
        "packets": [
            {
                "timestamp": p.timestamp,
                "src_ip": p.src_ip,
                "dst_ip": p.dst_ip,
                "src_port": p.src_port,
                "dst_port": p.dst_port,
                "src_mac": p.src_mac,
                "dst_mac": p.dst_mac,
                "protocol": p.protocol.value,
                "protocol_code": p.protocol_code,
                "tcp_flags": int(p.tcp_flags),
                "ip_layer_size": p.ip_layer_size,
                "transport_layer_size": p.transport_layer_size,
                "direction": int(p.direction),
                "payload_b64": base64.b64encode(p.payload).decode("ascii"),
            }
            for p in flow.packets
        ],
    }


def flow_from_dict(d: dict) -> FlowRecord:
    key = FlowKey(
        d["key"]["init_ip"],
        d["key"]["init_port"],
        d["key"]["resp_ip"],
        d["key"]["resp_port"],
        d["key"]["protocol_code"],
    )
    packets = [
        PacketRecord(
            timestamp=p["timestamp"],
            src_ip=p["src_ip"],
            dst_ip=p["dst_ip"],
            src_port=p["src_port"],
            dst_port=p["dst_port"],
            src_mac=p["src_mac"],
            dst_mac=p["dst_mac"],
            protocol=Protocol(p["protocol"]),
            protocol_code=p["protocol_code"],
            tcp_flags=TcpFlags(p["tcp_flags"]),
            ip_layer_size=p["ip_layer_size"],
            transport_layer_size=p["transport_layer_size"],
            payload=base64.b64decode(p["payload_b64"]),
            direction=Direction(p["direction"]),
        )
        for p in d["packets"]
    ]
    return FlowRecord(
        key=key,
        packets=packets,
        flow_features=np.array(d["flow_features"], dtype=np.float64),
        label=d.get("label"),
        src_mac=d.get("src_mac", ""),
        dst_mac=d.get("dst_mac", ""),
    )


def write_flows_jsonl(path: str | Path, flows: Iterable[FlowRecord]) -> int:
    """Write flows as JSON lines, preceded by a schema header line."""
    count = 0
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema_version": FEATURE_SCHEMA_VERSION}) + "\n")
        for flow in flows:
            fh.write(json.dumps(flow_to_dict(flow)) + "\n")
            count += 1
    return count


def read_flows_jsonl(path: str | Path) -> Iterator[FlowRecord]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema_version") != FEATURE_SCHEMA_VERSION:
            raise ValueError(f"schema version mismatch in {path}: {header}")
        for line in fh:
            line = line.strip()
            if line:
                yield flow_from_dict(json.loads(line))


def write_features_csv(path: str | Path, flows: Iterable[FlowRecord]) -> int:
    """Flow feature dump as CSV; first header cell carries the schema version."""
    count = 0
    with open(path, "w") as fh:
        fh.write(",".join([f"# {FEATURE_SCHEMA_VERSION}"] + FLOW_FEATURE_NAMES + ["label"]) + "\n")
        for flow in flows:
            cells = [repr(count)] + [repr(v) for v in flow.flow_features] + [flow.label or ""]
            fh.write(",".join(cells) + "\n")
            count += 1
    return count
