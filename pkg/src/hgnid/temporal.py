"""Per-destination rolling-window temporal features.

For every destination host a time-bounded event window is maintained; 16
named features are computed over the events in (t - W, t] and concatenated
with the 76 flow features into a 92-entry extended vector.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flows import FLOW_FEATURE_NAMES, FlowRecord
from .packets import Direction, TcpFlags

TEMPORAL_SCHEMA_VERSION = "hgnid-temporal-1"

DEFAULT_WINDOW_S = 60.0
DEFAULT_HTTP_PORTS = frozenset({80, 8080, 8000, 443})
DEFAULT_VULNERABLE_PORTS = frozenset({23, 2323, 445, 3389, 21, 69})
DNS_PORT = 53

TEMPORAL_FEATURE_NAMES: list[str] = [
    "Rolling_UDP_Sum",
    "Rolling_TCP_Sum",
    "Rolling_ACK_Sum",
    "Rolling_FIN_Sum",
    "Rolling_RST_Sum",
    "Rolling_fin_Sum",
    "Rolling_psh_Sum",
    "Rolling_SYN_Sum",
    "Rolling_ICMP_Sum",
    "Rolling_http_port",
    "Rolling_Average_Duration",
    "Rolling_DNS_Sum",
    "Rolling_vulnerable_port",
    "Rolling_packets_Sum",
    "Rolling_bipackets_Sum",
    "Unique_Ports_In_SourceDestination",
]
assert len(TEMPORAL_FEATURE_NAMES) == 16

EXTENDED_FEATURE_NAMES: list[str] = FLOW_FEATURE_NAMES + TEMPORAL_FEATURE_NAMES
EXTENDED_DIM = 92
assert len(EXTENDED_FEATURE_NAMES) == EXTENDED_DIM


class OrderingError(Exception):
    """Flows were presented out of end-time order beyond the tolerance."""


# packet event: (ts_us, protocol_code, flags, dst_port, direction)
# flow event:   (ts_us, duration_s, resp_port, init_port)


@dataclass
class _DestState:
    packet_events: deque = field(default_factory=deque)
    bi_events: deque = field(default_factory=deque)  # (ts_us,)
    flow_events: deque = field(default_factory=deque)

    def evict(self, cutoff_us: int) -> None:
        for dq in (self.packet_events, self.bi_events, self.flow_events):
            while dq and dq[0][0] <= cutoff_us:
                dq.popleft()

    def empty(self) -> bool:
        return not (self.packet_events or self.bi_events or self.flow_events)


class TemporalState:
    """Rolling-window accumulators keyed by destination IP.

    Flows must be fed in non-decreasing end-time order. Updates insert one
    packet event per packet under the packet's destination IP, one
    bidirectional event under each endpoint, and one flow event under the
    flow's responder IP.
    """

    def __init__(
        self,
        window_s: float = DEFAULT_WINDOW_S,
        http_ports: frozenset[int] = DEFAULT_HTTP_PORTS,
        vulnerable_ports: frozenset[int] = DEFAULT_VULNERABLE_PORTS,
        tolerance_s: float = 0.0,
    ):
        self.window_us = int(window_s * 1e6)
        self.http_ports = frozenset(http_ports)
        self.vulnerable_ports = frozenset(vulnerable_ports)
        self.tolerance_us = int(tolerance_s * 1e6)
        self._dests: dict[str, _DestState] = {}
        self._clock_us = -(1 << 62)

    def _dest(self, ip: str) -> _DestState:
        st = self._dests.get(ip)
        if st is None:
            st = _DestState()
            self._dests[ip] = st
        return st

    def update(self, flow: FlowRecord) -> None:
        """Insert a closed flow's events and advance the window clock."""
        end = flow.end_time
        if end < self._clock_us - self.tolerance_us:
            raise OrderingError(
                f"flow ends at {end} but state clock is already {self._clock_us}"
            )
        self._clock_us = max(self._clock_us, end)
        for p in flow.packets:
            self._dest(p.dst_ip).packet_events.append(
                (p.timestamp, p.protocol_code, int(p.tcp_flags), p.dst_port, int(p.direction))
            )
            self._dest(p.dst_ip).bi_events.append((p.timestamp,))
            self._dest(p.src_ip).bi_events.append((p.timestamp,))
        self._dest(flow.key.resp_ip).flow_events.append(
            (end, flow.duration_s, flow.key.resp_port, flow.key.init_port)
        )
        cutoff = self._clock_us - self.window_us
        gone = []
        for ip, st in self._dests.items():
            st.evict(cutoff)
            if st.empty():
                gone.append(ip)
        for ip in gone:
            del self._dests[ip]

    def features(self, dest_ip: str, at_us: int | None = None) -> np.ndarray:
        """The 16 temporal features for a destination over (at - W, at]."""
        at = self._clock_us if at_us is None else at_us
        st = self._dests.get(dest_ip)
        out = np.zeros(16, dtype=np.float64)
        if st is None:
            return out
        cutoff = at - self.window_us
        st.evict(cutoff)

        udp = tcp = ack = fin = rst = fin_bwd = psh = syn = icmp = dns = pkts = 0
        for ts, proto, flags, dst_port, direction in st.packet_events:
            if ts > at:
                continue
            pkts += 1
            if proto == 17:
                udp += 1
            elif proto == 6:
                tcp += 1
                if flags & TcpFlags.ACK:
                    ack += 1
                if flags & TcpFlags.FIN:
                    fin += 1
                    if direction == Direction.BACKWARD:
                        fin_bwd += 1
                if flags & TcpFlags.RST:
                    rst += 1
                if flags & TcpFlags.PSH:
                    psh += 1
                if flags & TcpFlags.SYN:
                    syn += 1
            elif proto == 1:
                icmp += 1
            if dst_port == DNS_PORT:
                dns += 1

        bipkts = sum(1 for (ts,) in st.bi_events if ts <= at)

        http = 0
        vulnerable = 0
        durations: list[float] = []
        ports: set[int] = set()
        for ts, dur, resp_port, init_port in st.flow_events:
            if ts > at:
                continue
            durations.append(dur)
            ports.add(init_port)
            if resp_port in self.http_ports:
                http += 1
            if resp_port in self.vulnerable_ports:
                vulnerable = 1

        out[:] = [
            udp, tcp, ack, fin, rst, fin_bwd, psh, syn, icmp,
            http,
            float(np.mean(durations)) if durations else 0.0,
            dns,
            vulnerable,
            pkts,
            bipkts,
            len(ports),
        ]
        return out

    # --- checkpoint/restore ---

    def to_dict(self) -> dict:
        return {
            "schema_version": TEMPORAL_SCHEMA_VERSION,
            "window_us": self.window_us,
            "http_ports": sorted(self.http_ports),
            "vulnerable_ports": sorted(self.vulnerable_ports),
            "tolerance_us": self.tolerance_us,
            "clock_us": self._clock_us,
            "dests": {
                ip: {
                    "packet_events": [list(e) for e in st.packet_events],
                    "bi_events": [list(e) for e in st.bi_events],
                    "flow_events": [list(e) for e in st.flow_events],
                }
                for ip, st in self._dests.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TemporalState":
        if d.get("schema_version") != TEMPORAL_SCHEMA_VERSION:
            raise ValueError(f"unsupported temporal checkpoint: {d.get('schema_version')}")
        state = cls(
            window_s=d["window_us"] / 1e6,
            http_ports=frozenset(d["http_ports"]),
            vulnerable_ports=frozenset(d["vulnerable_ports"]),
            tolerance_s=d["tolerance_us"] / 1e6,
        )
        state._clock_us = d["clock_us"]
        for ip, ev in d["dests"].items():
            st = _DestState(
                packet_events=deque(tuple(e) for e in ev["packet_events"]),
                bi_events=deque(tuple(e) for e in ev["bi_events"]),
                flow_events=deque(tuple(e) for e in ev["flow_events"]),
            )
            state._dests[ip] = st
        return state

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "TemporalState":
        return cls.from_dict(json.loads(Path(path).read_text()))


def extend_features(flow_features: np.ndarray, temporal_features: np.ndarray) -> np.ndarray:
    """Concatenate [flow (76) || temporal (16)] into the 92-entry vector."""
    flow_features = np.asarray(flow_features, dtype=np.float64)
    temporal_features = np.asarray(temporal_features, dtype=np.float64)
    if flow_features.shape != (76,) or temporal_features.shape != (16,):
        raise ValueError(
            f"bad shapes: flow {flow_features.shape}, temporal {temporal_features.shape}"
        )
    if not (np.isfinite(flow_features).all() and np.isfinite(temporal_features).all()):
        raise ValueError("non-finite feature values")
    return np.concatenate([flow_features, temporal_features])


class TemporalFeaturizer:
    """Stateful transformer: closed flows in, 92-entry extended vectors out."""

    def __init__(self, window_s: float = DEFAULT_WINDOW_S, **kwargs):
        self.state = TemporalState(window_s=window_s, **kwargs)

    def update(self, flow: FlowRecord) -> np.ndarray:
        self.state.update(flow)
        temporal = self.state.features(flow.key.resp_ip, at_us=flow.end_time)
        return extend_features(flow.flow_features, temporal)

    def transform(self, flows) -> np.ndarray:
        return np.stack([self.update(f) for f in flows])
