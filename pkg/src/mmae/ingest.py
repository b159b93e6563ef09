"""PCAP parsing, five-tuple sessionization, anonymization and flow records.

Only classic libpcap captures are understood. Each packet is reduced to the
bytes starting at its IP header; link layers other than Ethernet (with
802.1Q tags), raw IP, BSD loopback and Linux cooked capture are skipped.

Record file layout (little-endian, fixed width)::

    header:  8s magic b"MMAEFLOW" | u32 version (=1) | u32 n_records
    row:     i64 flow_id | i32 label (-1 = unlabeled)
             f32[1600] bytes | i32[5] payload lengths | f32[5] inter-arrivals
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

N_PACKETS = 5
HEADER_BYTES = 80
PAYLOAD_BYTES = 240
PACKET_BYTES = HEADER_BYTES + PAYLOAD_BYTES
FLOW_BYTES = N_PACKETS * PACKET_BYTES

PCAP_MAGIC_USEC = 0xA1B2C3D4
PCAP_MAGIC_NSEC = 0xA1B23C4D

LINKTYPE_NULL = 0
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_RAW_ALT = (12, 14)
LINKTYPE_LINUX_SLL = 113

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17
PROTO_ICMPV6 = 58

TCP_FLAG_BITS = {"FIN": 0x01, "SYN": 0x02, "RST": 0x04, "PSH": 0x08, "ACK": 0x10, "URG": 0x20}


class MalformedCapture(ValueError):
    """The capture's global header cannot be parsed."""


class Direction(enum.IntEnum):
    UPLINK = 0
    DOWNLINK = 1


class AppProto(enum.IntEnum):
    TCP = 0
    UDP = 1
    DNS = 2
    ICMP = 3
    OTHER = 4


@dataclass(frozen=True)
class RawPacket:
    """One parsed packet.

    ``link_payload`` holds the bytes from the IP header onward (as captured,
    possibly snapped). ``header_len`` is the IP + transport header length in
    those bytes, so ``link_payload[header_len:]`` is the transport payload.
    """

    timestamp: float
    link_payload: bytes
    five_tuple: tuple
    header_len: int
    payload_len: int
    total_len: int
    tcp_flags: frozenset = frozenset()
    app_proto_hint: AppProto = AppProto.OTHER
    direction: Direction = Direction.UPLINK


@dataclass
class RawFlow:
    flow_id: int
    packets: list
    five_tuple: tuple
    capture_start: float = 0.0


@dataclass
class FlowRecord:
    flow_id: int
    bytes: np.ndarray
    pkt_payload_len: np.ndarray
    pkt_inter_arrival: np.ndarray
    label: int = -1


@dataclass
class ParseStats:
    n_packets: int = 0
    n_parsed: int = 0
    n_truncated: int = 0
    n_unsupported: int = 0
    link_types: set = field(default_factory=set)


def _ip_str(raw: bytes) -> str:
    if len(raw) == 4:
        return ".".join(str(b) for b in raw)
    return ":".join(raw[i:i + 2].hex() for i in range(0, 16, 2))


def canonical_five_tuple(src_ip, dst_ip, src_port, dst_port, proto) -> tuple:
    """Unordered five-tuple: both directions of a session map to one key."""
    a, b = (src_ip, src_port), (dst_ip, dst_port)
    lo, hi = (a, b) if a <= b else (b, a)
    return (lo[0], hi[0], lo[1], hi[1], proto)


def _strip_link(data: bytes, linktype: int) -> bytes | None:
    if linktype == LINKTYPE_ETHERNET:
        off = 12
        if len(data) < off + 2:
            return None
        ethertype = struct.unpack_from("!H", data, off)[0]
        off += 2
        while ethertype in (0x8100, 0x88A8):
            if len(data) < off + 4:
                return None
            ethertype = struct.unpack_from("!H", data, off + 2)[0]
            off += 4
        if ethertype not in (0x0800, 0x86DD):
            return b""
        return data[off:]
    if linktype == LINKTYPE_RAW or linktype in LINKTYPE_RAW_ALT:
        return data
    if linktype == LINKTYPE_NULL:
        return data[4:] if len(data) >= 4 else None
    if linktype == LINKTYPE_LINUX_SLL:
        if len(data) < 16:
            return None
        ethertype = struct.unpack_from("!H", data, 14)[0]
        if ethertype not in (0x0800, 0x86DD):
            return b""
        return data[16:]
    return b""


def parse_ip_packet(ts: float, ip: bytes) -> RawPacket | None:
    """Parse bytes starting at an IP header. Returns None when truncated."""
    if not ip:
        return None
    version = ip[0] >> 4
    if version == 4:
        if len(ip) < 20:
            return None
        ihl = (ip[0] & 0x0F) * 4
        if ihl < 20 or len(ip) < ihl:
            return None
        total_len = struct.unpack_from("!H", ip, 2)[0]
        proto = ip[9]
        src, dst = _ip_str(ip[12:16]), _ip_str(ip[16:20])
        l4_off = ihl
    elif version == 6:
        if len(ip) < 40:
            return None
        total_len = 40 + struct.unpack_from("!H", ip, 4)[0]
        proto = ip[6]
        src, dst = _ip_str(ip[8:24]), _ip_str(ip[24:40])
        l4_off = 40
    else:
        return None

    sport = dport = 0
    flags: set = set()
    if proto == PROTO_TCP:
        if len(ip) < l4_off + 20:
            return None
        sport, dport = struct.unpack_from("!HH", ip, l4_off)
        data_off = (ip[l4_off + 12] >> 4) * 4
        bits = ip[l4_off + 13]
        flags = {name for name, bit in TCP_FLAG_BITS.items() if bits & bit}
        header_len = l4_off + max(data_off, 20)
        hint = AppProto.DNS if 53 in (sport, dport) else AppProto.TCP
    elif proto == PROTO_UDP:
        if len(ip) < l4_off + 8:
            return None
        sport, dport = struct.unpack_from("!HH", ip, l4_off)
        header_len = l4_off + 8
        hint = AppProto.DNS if 53 in (sport, dport) else AppProto.UDP
    elif proto in (PROTO_ICMP, PROTO_ICMPV6):
        if len(ip) < l4_off + 8:
            return None
        header_len = l4_off + 8
        hint = AppProto.ICMP
    else:
        header_len = l4_off
        hint = AppProto.OTHER

    total_len = max(total_len, header_len)
    return RawPacket(
        timestamp=ts,
        link_payload=bytes(ip),
        five_tuple=(src, dst, sport, dport, proto),
        header_len=header_len,
        payload_len=total_len - header_len,
        total_len=total_len,
        tcp_flags=frozenset(flags),
        app_proto_hint=hint,
    )


def read_pcap(capture: bytes, stats: ParseStats | None = None) -> list[RawPacket]:
    """Parse a classic PCAP byte stream into packets in capture order."""
    stats = stats if stats is not None else ParseStats()
    if len(capture) < 24:
        raise MalformedCapture("capture shorter than the 24-byte global header")
    magic_le = struct.unpack_from("<I", capture, 0)[0]
    if magic_le in (PCAP_MAGIC_USEC, PCAP_MAGIC_NSEC):
        endian = "<"
    else:
        magic_be = struct.unpack_from(">I", capture, 0)[0]
        if magic_be not in (PCAP_MAGIC_USEC, PCAP_MAGIC_NSEC):
            raise MalformedCapture(f"bad magic 0x{magic_le:08x}")
        endian = ">"
    magic = struct.unpack_from(endian + "I", capture, 0)[0]
    frac = 1e-9 if magic == PCAP_MAGIC_NSEC else 1e-6
    linktype = struct.unpack_from(endian + "I", capture, 20)[0] & 0x0FFFFFFF
    stats.link_types.add(linktype)

    packets = []
    off = 24
    rec = struct.Struct(endian + "IIII")
    while off < len(capture):
        stats.n_packets += 1
        if off + 16 > len(capture):
            stats.n_truncated += 1
            break
        sec, sub, incl_len, _orig_len = rec.unpack_from(capture, off)
        off += 16
        if off + incl_len > len(capture):
            stats.n_truncated += 1
            break
        data = capture[off:off + incl_len]
        off += incl_len
        ip = _strip_link(data, linktype)
        if ip is None:
            stats.n_truncated += 1
            continue
        if not ip:
            stats.n_unsupported += 1
            continue
        pkt = parse_ip_packet(sec + sub * frac, ip)
        if pkt is None:
            stats.n_truncated += 1
            continue
        stats.n_parsed += 1
        packets.append(pkt)
    return packets


def segment_flows(capture: bytes, stats: ParseStats | None = None) -> list[RawFlow]:
    """Group packets into bidirectional five-tuple sessions.

    Flows are returned in order of first appearance; ``flow_id`` is that
    order. Packets inside a flow are sorted by timestamp, ties kept in
    capture order. Skipped packets are counted in ``stats``.
    """
    packets = read_pcap(capture, stats)
    if not packets:
        return []
    capture_start = min(p.timestamp for p in packets)
    groups: dict[tuple, list] = {}
    for pkt in packets:
        key = canonical_five_tuple(*pkt.five_tuple)
        groups.setdefault(key, []).append(pkt)

    flows = []
    for flow_id, (key, pkts) in enumerate(groups.items()):
        pkts = sorted(pkts, key=lambda p: p.timestamp)
        initiator = (pkts[0].five_tuple[0], pkts[0].five_tuple[2])
        pkts = [
            replace(p, direction=Direction.UPLINK
                    if (p.five_tuple[0], p.five_tuple[2]) == initiator else Direction.DOWNLINK)
            for p in pkts
        ]
        flows.append(RawFlow(flow_id=flow_id, packets=pkts, five_tuple=key,
                             capture_start=capture_start))
    return flows


def anonymize(pkt: RawPacket) -> RawPacket:
    """Zero IP addresses and transport ports in the packet bytes.

    The five-tuple metadata is kept as-is; checksums are not recomputed.
    """
    buf = bytearray(pkt.link_payload)
    if not buf:
        return pkt
    version = buf[0] >> 4
    if version == 4 and len(buf) >= 20:
        end = min(len(buf), 20)
        buf[12:end] = bytes(end - 12)
        l4_off = (buf[0] & 0x0F) * 4
        proto = buf[9]
    elif version == 6 and len(buf) >= 40:
        buf[8:40] = bytes(32)
        l4_off = 40
        proto = buf[6]
    else:
        return pkt
    if proto in (PROTO_TCP, PROTO_UDP) and len(buf) >= l4_off + 4:
        buf[l4_off:l4_off + 4] = bytes(4)
    return replace(pkt, link_payload=bytes(buf))


def _fit(chunk: bytes, width: int) -> bytes:
    return chunk[:width] + bytes(max(0, width - len(chunk)))


def normalize_flow(flow: RawFlow, label: int = -1) -> FlowRecord:
    """Render the first five packets as 5 x (80 header + 240 payload) bytes in [0, 1]."""
    out = np.zeros(FLOW_BYTES, dtype=np.float32)
    lens = np.zeros(N_PACKETS, dtype=np.int64)
    gaps = np.zeros(N_PACKETS, dtype=np.float64)
    prev_ts = None
    for k, pkt in enumerate(flow.packets[:N_PACKETS]):
        raw = pkt.link_payload
        seg = _fit(raw[:pkt.header_len], HEADER_BYTES) + _fit(raw[pkt.header_len:], PAYLOAD_BYTES)
        out[k * PACKET_BYTES:(k + 1) * PACKET_BYTES] = np.frombuffer(seg, dtype=np.uint8) / 255.0
        lens[k] = pkt.payload_len
        gaps[k] = 0.0 if prev_ts is None else pkt.timestamp - prev_ts
        prev_ts = pkt.timestamp
    return FlowRecord(flow_id=flow.flow_id, bytes=out, pkt_payload_len=lens,
                      pkt_inter_arrival=gaps, label=label)


def preprocess_capture(capture: bytes, labels: dict | None = None,
                       stats: ParseStats | None = None) -> tuple[list[RawFlow], list[FlowRecord]]:
    """segment -> anonymize -> normalize. ``labels`` maps canonical five-tuples to classes."""
    flows = segment_flows(capture, stats)
    records = []
    for flow in flows:
        anon = RawFlow(flow.flow_id, [anonymize(p) for p in flow.packets],
                       flow.five_tuple, flow.capture_start)
        label = -1 if labels is None else labels.get(flow.five_tuple, -1)
        records.append(normalize_flow(anon, label))
    return flows, records


_MAGIC = b"MMAEFLOW"
_VERSION = 1
_ROW = np.dtype([
    ("flow_id", "<i8"),
    ("label", "<i4"),
    ("bytes", "<f4", (FLOW_BYTES,)),
    ("payload_len", "<i4", (N_PACKETS,)),
    ("inter_arrival", "<f4", (N_PACKETS,)),
])


def write_records(path, records: list[FlowRecord]) -> None:
    rows = np.zeros(len(records), dtype=_ROW)
    for i, rec in enumerate(records):
        rows[i] = (rec.flow_id, rec.label, rec.bytes, rec.pkt_payload_len, rec.pkt_inter_arrival)
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(records)))
        fh.write(rows.tobytes())


def read_records(path) -> list[FlowRecord]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a flow record file")
    version, n = struct.unpack_from("<II", raw, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported record version {version}")
    rows = np.frombuffer(raw, dtype=_ROW, count=n, offset=16)
    return [
        FlowRecord(flow_id=int(r["flow_id"]), bytes=r["bytes"].copy(),
                   pkt_payload_len=r["payload_len"].astype(np.int64),
                   pkt_inter_arrival=r["inter_arrival"].astype(np.float64),
                   label=int(r["label"]))
        for r in rows
    ]
