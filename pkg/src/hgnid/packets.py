"""Packet records and pcap file I/O.

Reads classic pcap (both endians, micro/nanosecond) and pcapng captures,
yielding one :class:`PacketRecord` per IPv4 frame. Non-IPv4 frames are
skipped and counted. A minimal classic-pcap writer and Ethernet frame
builders are provided for generating synthetic captures.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator


class Protocol(enum.Enum):
    TCP = "tcp"
    UDP = "udp"
    ICMP = "icmp"
    OTHER = "other"


class TcpFlags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20


class Direction(enum.IntEnum):
    FORWARD = 0
    BACKWARD = 1


IP_PROTO_ICMP = 1
IP_PROTO_TCP = 6
IP_PROTO_UDP = 17


class PcapError(Exception):
    """Unreadable or structurally invalid capture file."""


@dataclass
class PacketRecord:
    """One parsed IPv4 packet."""

    timestamp: int  # microseconds since epoch
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    src_mac: str
    dst_mac: str
    protocol: Protocol
    protocol_code: int
    tcp_flags: TcpFlags
    ip_layer_size: int
    transport_layer_size: int
    payload: bytes
    direction: Direction = Direction.FORWARD

    @property
    def payload_size(self) -> int:
        return len(self.payload)

    def has_flag(self, flag: TcpFlags) -> bool:
        return bool(self.tcp_flags & flag)


@dataclass
class ParseStats:
    accepted: int = 0
    skipped_non_ip: int = 0
    malformed: int = 0


def _mac_str(raw: bytes) -> str:
    return ":".join(f"{b:02X}" for b in raw)


def _ip_str(raw: bytes) -> str:
    return ".".join(str(b) for b in raw)


def parse_ethernet_frame(data: bytes, timestamp_us: int) -> PacketRecord | None:
    """Parse one Ethernet frame into a PacketRecord.

    Returns None for non-IPv4 frames; raises ValueError on truncated or
    malformed headers.
    """
    if len(data) < 14:
        raise ValueError("frame shorter than Ethernet header")
    dst_mac = _mac_str(data[0:6])
    src_mac = _mac_str(data[6:12])
    ethertype = struct.unpack("!H", data[12:14])[0]
    offset = 14
    # 802.1Q VLAN tag
    if ethertype == 0x8100:
        if len(data) < 18:
            raise ValueError("truncated VLAN tag")
        ethertype = struct.unpack("!H", data[16:18])[0]
        offset = 18
    if ethertype != 0x0800:
        return None

    ip = data[offset:]
    if len(ip) < 20:
        raise ValueError("truncated IPv4 header")
    version_ihl = ip[0]
    if version_ihl >> 4 != 4:
        raise ValueError("not IPv4")
    ihl = (version_ihl & 0x0F) * 4
    if ihl < 20 or len(ip) < ihl:
        raise ValueError("bad IHL")
    total_length = struct.unpack("!H", ip[2:4])[0]
    proto_code = ip[9]
    src_ip = _ip_str(ip[12:16])
    dst_ip = _ip_str(ip[16:20])
    # clamp to captured bytes; total_length governs the logical sizes
    body = ip[ihl:total_length] if total_length <= len(ip) else ip[ihl:]

    src_port = dst_port = 0
    flags = TcpFlags(0)
    if proto_code == IP_PROTO_TCP:
        if len(body) < 20:
            raise ValueError("truncated TCP header")
        src_port, dst_port = struct.unpack("!HH", body[0:4])
        data_offset = (body[12] >> 4) * 4
        if data_offset < 20 or len(body) < data_offset:
            raise ValueError("bad TCP data offset")
        flags = TcpFlags(body[13] & 0x3F)
        protocol = Protocol.TCP
        transport_size = data_offset
        payload = bytes(body[data_offset:])
    elif proto_code == IP_PROTO_UDP:
        if len(body) < 8:
            raise ValueError("truncated UDP header")
        src_port, dst_port = struct.unpack("!HH", body[0:4])
        protocol = Protocol.UDP
        transport_size = 8
        payload = bytes(body[8:])
    elif proto_code == IP_PROTO_ICMP:
        if len(body) < 8:
            raise ValueError("truncated ICMP header")
        protocol = Protocol.ICMP
        transport_size = 8
        payload = bytes(body[8:])
    else:
        protocol = Protocol.OTHER
        transport_size = 0
        payload = bytes(body)

    return PacketRecord(
        timestamp=timestamp_us,
        src_ip=src_ip,
        dst_ip=dst_ip,
        src_port=src_port,
        dst_port=dst_port,
        src_mac=src_mac,
        dst_mac=dst_mac,
        protocol=protocol,
        protocol_code=proto_code,
        tcp_flags=flags,
        ip_layer_size=total_length,
        transport_layer_size=transport_size,
        payload=payload,
    )


# --- classic pcap ---

_PCAP_MAGICS = {
    0xA1B2C3D4: ("<", 1_000_000),  # little-endian file read on LE host
    0xA1B23C4D: ("<", 1_000_000_000),
}


def _iter_pcap_classic(fh: BinaryIO, stats: ParseStats) -> Iterator[PacketRecord]:
    header = fh.read(24)
    if len(header) < 24:
        raise PcapError("truncated pcap global header")
    magic_le = struct.unpack("<I", header[0:4])[0]
    magic_be = struct.unpack(">I", header[0:4])[0]
    if magic_le in (0xA1B2C3D4, 0xA1B23C4D):
        endian = "<"
        tick = 1_000_000 if magic_le == 0xA1B2C3D4 else 1_000_000_000
    elif magic_be in (0xA1B2C3D4, 0xA1B23C4D):
        endian = ">"
        tick = 1_000_000 if magic_be == 0xA1B2C3D4 else 1_000_000_000
    else:
        raise PcapError(f"unknown pcap magic: {header[0:4]!r}")

    while True:
        rec = fh.read(16)
        if len(rec) == 0:
            return
        if len(rec) < 16:
            stats.malformed += 1
            return
        ts_sec, ts_frac, incl_len, _orig = struct.unpack(endian + "IIII", rec)
        data = fh.read(incl_len)
        if len(data) < incl_len:
            stats.malformed += 1
            return
        ts_us = ts_sec * 1_000_000 + ts_frac * 1_000_000 // tick
        yield from _emit(data, ts_us, stats)


def _emit(data: bytes, ts_us: int, stats: ParseStats) -> Iterator[PacketRecord]:
    try:
        rec = parse_ethernet_frame(data, ts_us)
    except ValueError:
        stats.malformed += 1
        return
    if rec is None:
        stats.skipped_non_ip += 1
        return
    stats.accepted += 1
    yield rec


# --- pcapng ---

_SHB = 0x0A0D0D0A
_IDB = 0x00000001
_EPB = 0x00000006
_SPB = 0x00000003


def _iter_pcapng(fh: BinaryIO, stats: ParseStats) -> Iterator[PacketRecord]:
    endian = "<"
    tsresol: dict[int, int] = {}  # interface id -> ticks per second
    if_count = 0
    first = True
    while True:
        head = fh.read(8)
        if len(head) == 0:
            return
        if len(head) < 8:
            stats.malformed += 1
            return
        btype, blen = struct.unpack(endian + "II", head)
        if first:
            if btype != _SHB:
                raise PcapError("pcapng file does not start with a section header")
            first = False
        if btype == _SHB:
            body = fh.read(max(blen, 12) - 8)
            bom = struct.unpack("<I", body[0:4])[0]
            endian = "<" if bom == 0x1A2B3C4D else ">"
            # re-read block length under correct endianness
            blen = struct.unpack(endian + "I", head[4:8])[0]
            remaining = blen - 8 - len(body)
            if remaining > 0:
                fh.read(remaining)
            tsresol.clear()
            if_count = 0
            continue
        body = fh.read(blen - 8)
        if len(body) < blen - 8:
            stats.malformed += 1
            return
        payload = body[:-4]  # strip trailing block length
        if btype == _IDB:
            ticks = 1_000_000
            opts = payload[8:]
            while len(opts) >= 4:
                code, olen = struct.unpack(endian + "HH", opts[0:4])
                oval = opts[4 : 4 + olen]
                if code == 9 and olen >= 1:  # if_tsresol
                    v = oval[0]
                    ticks = 2 ** (v & 0x7F) if v & 0x80 else 10 ** v
                if code == 0:
                    break
                opts = opts[4 + olen + (-olen % 4) :]
            tsresol[if_count] = ticks
            if_count += 1
        elif btype == _EPB:
            if len(payload) < 20:
                stats.malformed += 1
                continue
            iface, ts_hi, ts_lo, cap_len, _orig = struct.unpack(
                endian + "IIIII", payload[0:20]
            )
            data = payload[20 : 20 + cap_len]
            ticks = tsresol.get(iface, 1_000_000)
            ts = ((ts_hi << 32) | ts_lo) * 1_000_000 // ticks
            yield from _emit(data, ts, stats)
        elif btype == _SPB:
            if len(payload) < 4:
                stats.malformed += 1
                continue
            # captured length is the remainder of the block
            yield from _emit(payload[4:], 0, stats)
        # all other block types are skipped


def read_pcap(path: str | Path, stats: ParseStats | None = None) -> Iterator[PacketRecord]:
    """Yield PacketRecords from a pcap or pcapng file in capture order."""
    path = Path(path)
    if not path.is_file():
        raise PcapError(f"no such capture file: {path}")
    if stats is None:
        stats = ParseStats()
    with open(path, "rb") as fh:
        magic = fh.read(4)
        fh.seek(0)
        if len(magic) < 4:
            raise PcapError(f"file too short to be a capture: {path}")
        if struct.unpack("<I", magic)[0] == _SHB:
            yield from _iter_pcapng(fh, stats)
        else:
            yield from _iter_pcap_classic(fh, stats)


# --- writing + frame crafting (synthetic captures) ---


def write_pcap(path: str | Path, frames: list[tuple[int, bytes]]) -> None:
    """Write (timestamp_us, raw_frame) pairs as a classic little-endian pcap."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1))
        for ts_us, data in frames:
            fh.write(
                struct.pack("<IIII", ts_us // 1_000_000, ts_us % 1_000_000, len(data), len(data))
            )
            fh.write(data)


def _mac_bytes(mac: str) -> bytes:
    return bytes(int(p, 16) for p in mac.split(":"))


def _ip_bytes(ip: str) -> bytes:
    return bytes(int(p) for p in ip.split("."))


def _ipv4_header(proto: int, src_ip: str, dst_ip: str, body_len: int) -> bytes:
    total = 20 + body_len
    hdr = struct.pack(
        "!BBHHHBBH4s4s", 0x45, 0, total, 0, 0, 64, proto, 0, _ip_bytes(src_ip), _ip_bytes(dst_ip)
    )
    return hdr


def build_frame(
    src_ip: str,
    dst_ip: str,
    protocol: Protocol,
    src_port: int = 0,
    dst_port: int = 0,
    tcp_flags: TcpFlags = TcpFlags(0),
    payload: bytes = b"",
    src_mac: str = "AA:00:00:00:00:01",
    dst_mac: str = "AA:00:00:00:00:02",
) -> bytes:
    """Craft a raw Ethernet/IPv4 frame (checksums left at zero)."""
    if protocol is Protocol.TCP:
        transport = struct.pack(
            "!HHIIBBHHH", src_port, dst_port, 0, 0, 5 << 4, int(tcp_flags), 8192, 0, 0
        )
    elif protocol is Protocol.UDP:
        transport = struct.pack("!HHHH", src_port, dst_port, 8 + len(payload), 0)
    elif protocol is Protocol.ICMP:
        transport = struct.pack("!BBHHH", 8, 0, 0, 0, 0)
    else:
        transport = b""
    proto_code = {
        Protocol.TCP: IP_PROTO_TCP,
        Protocol.UDP: IP_PROTO_UDP,
        Protocol.ICMP: IP_PROTO_ICMP,
    }.get(protocol, 253)
    body = transport + payload
    ip = _ipv4_header(proto_code, src_ip, dst_ip, len(body)) + body
    eth = _mac_bytes(dst_mac) + _mac_bytes(src_mac) + struct.pack("!H", 0x0800)
    return eth + ip
