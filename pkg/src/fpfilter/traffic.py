"""Packets, hosts, home-network membership and capture-file ingestion.

Two capture formats are accepted by :func:`parse_capture`:

* classic libpcap files (either byte order, micro- or nanosecond
  timestamps) with Ethernet or raw-IPv4 link types;
* JSON-lines, one packet per line::

    {"ts":1.0,"src":"10.0.0.2","sport":4321,"dst":"172.16.0.1","dport":80,"payload_hex":"414243"}
"""

from __future__ import annotations

import enum
import ipaddress
import json
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import IO, Iterable, Iterator, Optional, Sequence, Union

logger = logging.getLogger(__name__)

MAX_PAYLOAD = 65535

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_IPV4 = 228

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_VLAN = (0x8100, 0x88A8)
IPPROTO_TCP = 6


class CaptureFormatError(ValueError):
    """Raised when a capture stream cannot be decoded at all."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Host:
    address: ipaddress.IPv4Address
    port: int

    def __post_init__(self):
        if not isinstance(self.address, ipaddress.IPv4Address):
            object.__setattr__(self, "address", ipaddress.IPv4Address(self.address))
        if isinstance(self.port, bool) or not isinstance(self.port, int):
            raise TypeError(f"port must be an int, got {self.port!r}")
        if not 0 <= self.port <= 65535:
            raise ValueError(f"port {self.port} out of range [0, 65535]")

    @classmethod
    def parse(cls, text: str) -> "Host":
        """Parse ``a.b.c.d:port``."""
        addr, _, port = text.rpartition(":")
        if not addr:
            raise ValueError(f"expected address:port, got {text!r}")
        return cls(ipaddress.IPv4Address(addr), int(port))

    def __str__(self) -> str:
        return f"{self.address}:{self.port}"


class HomeNet:
    """The set of protected address prefixes."""

    def __init__(self, prefixes: Iterable[Union[str, ipaddress.IPv4Network]]):
        nets = tuple(ipaddress.IPv4Network(p, strict=False) for p in prefixes)
        if not nets:
            raise ValueError("HomeNet needs at least one prefix")
        self.prefixes = nets

    @classmethod
    def parse(cls, text: str) -> "HomeNet":
        """Parse a comma-separated CIDR list such as ``172.16.0.0/16,10.1.0.0/24``."""
        return cls(p.strip() for p in text.split(",") if p.strip())

    def __contains__(self, address) -> bool:
        return in_homenet(address, self)

    def __eq__(self, other):
        return isinstance(other, HomeNet) and self.prefixes == other.prefixes

    def __hash__(self):
        return hash(self.prefixes)

    def __repr__(self):
        return f"HomeNet({[str(p) for p in self.prefixes]})"

    def __str__(self):
        return ",".join(str(p) for p in self.prefixes)


@lru_cache(maxsize=65536)
def _in_prefixes(address: ipaddress.IPv4Address, prefixes) -> bool:
    return any(address in net for net in prefixes)


def in_homenet(address, net: HomeNet) -> bool:
    if not isinstance(address, ipaddress.IPv4Address):
        address = ipaddress.IPv4Address(address)
    return _in_prefixes(address, net.prefixes)


@dataclass(frozen=True)
class Packet:
    source: Host
    destination: Host
    timestamp: float
    payload: bytes = b""

    def __post_init__(self):
        if not (math.isfinite(self.timestamp) and self.timestamp >= 0):
            raise ValueError(f"bad timestamp {self.timestamp!r}")
        if not isinstance(self.payload, bytes):
            object.__setattr__(self, "payload", bytes(self.payload))


class Direction(enum.Enum):
    INBOUND = "Inbound"
    OUTBOUND = "Outbound"
    INTERNAL = "Internal"
    EXTERNAL = "External"


def direction(p: Packet, net: HomeNet) -> Direction:
    src_in = in_homenet(p.source.address, net)
    dst_in = in_homenet(p.destination.address, net)
    if src_in and dst_in:
        return Direction.INTERNAL
    if src_in:
        return Direction.OUTBOUND
    if dst_in:
        return Direction.INBOUND
    return Direction.EXTERNAL


@dataclass(frozen=True)
class FlowKey:
    """A connection seen from the server side: client is outside, server inside."""

    client: Host
    server: Host

    def reverse(self) -> "FlowKey":
        return FlowKey(self.server, self.client)

    @classmethod
    def of(cls, p: Packet, net: HomeNet) -> "FlowKey":
        # Outbound packets travel server -> client; everything else is
        # oriented by the sender, which is taken as the initiator.
        if direction(p, net) is Direction.OUTBOUND:
            return cls(p.destination, p.source)
        return cls(p.source, p.destination)


def matches_alarm(a, p: Packet) -> bool:
    """True iff ``p`` is the exact reverse of the alarm's 4-tuple."""
    return p.source == a.victim and p.destination == a.attacker


# --- JSON-lines ----------------------------------------------------------------


def packet_to_json(p: Packet) -> str:
    return json.dumps(
        {
            "ts": p.timestamp,
            "src": str(p.source.address),
            "sport": p.source.port,
            "dst": str(p.destination.address),
            "dport": p.destination.port,
            "payload_hex": p.payload.hex(),
        },
        separators=(",", ":"),
    )


def packet_from_json(obj: dict, max_payload: int = MAX_PAYLOAD) -> Packet:
    payload_hex = obj["payload_hex"]
    if not isinstance(payload_hex, str):
        raise ValueError("payload_hex must be a string")
    payload = bytes.fromhex(payload_hex)
    if len(payload) > max_payload:
        raise ValueError(f"payload of {len(payload)} bytes exceeds limit {max_payload}")
    ts = obj["ts"]
    if isinstance(ts, bool) or not isinstance(ts, (int, float)):
        raise ValueError(f"bad ts {ts!r}")
    return Packet(
        source=Host(obj["src"], obj["sport"]),
        destination=Host(obj["dst"], obj["dport"]),
        timestamp=float(ts),
        payload=payload,
    )


def write_packets(packets: Iterable[Packet], sink: IO[str]) -> int:
    n = 0
    for p in packets:
        sink.write(packet_to_json(p))
        sink.write("\n")
        n += 1
    return n


def _parse_jsonl(data: bytes, warnings: Counter, max_payload: int) -> Iterator[Packet]:
    for lineno, raw in enumerate(data.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("not a JSON object")
            yield packet_from_json(obj, max_payload)
        except (ValueError, KeyError, TypeError) as exc:
            warnings["malformed"] += 1
            logger.warning("skipping malformed packet on line %d: %s", lineno, exc)


# --- pcap ------------------------------------------------------------------------


def _decode_ipv4_tcp(frame: bytes, ts: float, max_payload: int) -> Optional[Packet]:
    """Decode one IPv4 datagram; None for anything that is not a TCP segment.

    Raises ValueError on truncated or inconsistent headers.
    """
    if len(frame) < 20:
        raise ValueError("truncated IPv4 header")
    ver_ihl = frame[0]
    if ver_ihl >> 4 != 4:
        return None
    ihl = (ver_ihl & 0x0F) * 4
    if ihl < 20 or len(frame) < ihl:
        raise ValueError("bad IPv4 header length")
    total_len = struct.unpack_from("!H", frame, 2)[0]
    frag = struct.unpack_from("!H", frame, 6)[0]
    proto = frame[9]
    if proto != IPPROTO_TCP:
        return None
    if frag & 0x1FFF:
        # non-first fragment carries no TCP header
        return None
    end = min(len(frame), total_len) if total_len >= ihl else len(frame)
    tcp = frame[ihl:end]
    if len(tcp) < 20:
        raise ValueError("truncated TCP header")
    sport, dport = struct.unpack_from("!HH", tcp, 0)
    off = (tcp[12] >> 4) * 4
    if off < 20 or off > len(tcp):
        raise ValueError("bad TCP data offset")
    payload = bytes(tcp[off:])
    if len(payload) > max_payload:
        raise ValueError("payload exceeds limit")
    src = ipaddress.IPv4Address(frame[12:16])
    dst = ipaddress.IPv4Address(frame[16:20])
    return Packet(Host(src, sport), Host(dst, dport), ts, payload)


def _strip_link(frame: bytes, linktype: int) -> Optional[bytes]:
    if linktype in (LINKTYPE_RAW, LINKTYPE_IPV4):
        return frame
    if len(frame) < 14:
        raise ValueError("truncated Ethernet header")
    etype = struct.unpack_from("!H", frame, 12)[0]
    off = 14
    while etype in ETHERTYPE_VLAN:
        if len(frame) < off + 4:
            raise ValueError("truncated VLAN tag")
        etype = struct.unpack_from("!H", frame, off + 2)[0]
        off += 4
    if etype != ETHERTYPE_IPV4:
        return None
    return frame[off:]


def _parse_pcap(data: bytes, warnings: Counter, max_payload: int) -> Iterator[Packet]:
    endian, ts_div, linktype = _pcap_header(data)
    return _pcap_records(data, endian, ts_div, linktype, warnings, max_payload)


def _pcap_header(data: bytes):
    if len(data) < 24:
        raise CaptureFormatError("truncated pcap global header", 0)
    magic_le = struct.unpack_from("<I", data, 0)[0]
    if magic_le in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
        endian = "<"
    else:
        endian = ">"
    magic = struct.unpack_from(endian + "I", data, 0)[0]
    ts_div = 1e9 if magic == PCAP_MAGIC_NS else 1e6
    linktype = struct.unpack_from(endian + "I", data, 20)[0] & 0x0FFFFFFF
    if linktype not in (LINKTYPE_ETHERNET, LINKTYPE_RAW, LINKTYPE_IPV4):
        raise CaptureFormatError(f"unsupported link type {linktype}", 20)
    return endian, ts_div, linktype


def _pcap_records(data, endian, ts_div, linktype, warnings, max_payload) -> Iterator[Packet]:
    rec = struct.Struct(endian + "IIII")
    off = 24
    while off < len(data):
        if len(data) - off < rec.size:
            warnings["malformed"] += 1
            logger.warning("truncated pcap record header at offset %d", off)
            return
        sec, frac, incl, _orig = rec.unpack_from(data, off)
        start = off + rec.size
        if start + incl > len(data):
            warnings["malformed"] += 1
            logger.warning("truncated pcap record at offset %d", off)
            return
        frame = data[start:start + incl]
        off = start + incl
        try:
            ip = _strip_link(frame, linktype)
            if ip is None:
                warnings["non_tcp"] += 1
                continue
            pkt = _decode_ipv4_tcp(ip, sec + frac / ts_div, max_payload)
        except ValueError as exc:
            warnings["malformed"] += 1
            logger.warning("skipping malformed pcap record at offset %d: %s", start - rec.size, exc)
            continue
        if pkt is None:
            warnings["non_tcp"] += 1
            continue
        yield pkt


def parse_capture(
    stream: Union[IO[bytes], bytes],
    warnings: Optional[Counter] = None,
    max_payload: int = MAX_PAYLOAD,
) -> Iterator[Packet]:
    """Yield every TCP segment in a pcap or JSON-lines capture.

    ``warnings`` (a Counter), when supplied, accumulates ``malformed`` and
    ``non_tcp`` counts.
    """
    data = stream if isinstance(stream, (bytes, bytearray)) else stream.read()
    data = bytes(data)
    if warnings is None:
        warnings = Counter()
    if len(data) >= 4:
        be = struct.unpack_from(">I", data, 0)[0]
        le = struct.unpack_from("<I", data, 0)[0]
        if be in (PCAP_MAGIC_US, PCAP_MAGIC_NS) or le in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
            return _parse_pcap(data, warnings, max_payload)
    stripped = data.lstrip()
    if not stripped or stripped[:1] == b"{":
        return _parse_jsonl(data, warnings, max_payload)
    raise CaptureFormatError("unknown capture format (neither pcap magic nor JSON-lines)", 0)


def read_capture(path, warnings: Optional[Counter] = None, max_payload: int = MAX_PAYLOAD) -> list:
    with open(path, "rb") as fh:
        return list(parse_capture(fh, warnings, max_payload))


def write_pcap(packets: Sequence[Packet], sink: IO[bytes], linktype: int = LINKTYPE_ETHERNET) -> None:
    """Write packets as a little-endian microsecond pcap; used for fixtures and export."""
    sink.write(struct.pack("<IHHiIII", PCAP_MAGIC_US, 2, 4, 0, 0, 65535, linktype))
    for p in packets:
        frame = encode_tcp_frame(p, linktype)
        sec = int(p.timestamp)
        usec = int(round((p.timestamp - sec) * 1e6))
        if usec >= 1_000_000:
            sec, usec = sec + 1, usec - 1_000_000
        sink.write(struct.pack("<IIII", sec, usec, len(frame), len(frame)))
        sink.write(frame)


def encode_tcp_frame(p: Packet, linktype: int = LINKTYPE_ETHERNET) -> bytes:
    tcp = struct.pack("!HHIIBBHHH", p.source.port, p.destination.port, 0, 0, 5 << 4, 0x18, 65535, 0, 0)
    total = 20 + len(tcp) + len(p.payload)
    ip = struct.pack(
        "!BBHHHBBH4s4s", 0x45, 0, total, 0, 0, 64, IPPROTO_TCP, 0,
        p.source.address.packed, p.destination.address.packed,
    )
    body = ip + tcp + p.payload
    if linktype == LINKTYPE_ETHERNET:
        return b"\x00" * 12 + struct.pack("!H", ETHERTYPE_IPV4) + body
    return body
