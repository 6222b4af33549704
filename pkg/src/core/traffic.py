"""Capture parsing, flow assembly and subflow prefixes."""

from __future__ import annotations

import io
import ipaddress
import logging
import struct
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum

import dpkt
import pandas as pd

from src.core.exceptions import (
    MalformedCaptureError,
    UnsupportedLinkTypeError,
)

logger = logging.getLogger(__name__)

PROTO_TCP = 6
PROTO_UDP = 17

PACKET_CSV_COLUMNS = [
    "ts_us",
    "src_ip",
    "dst_ip",
    "src_port",
    "dst_port",
    "proto",
    "len",
    "flags",
]
LABEL_CSV_COLUMNS = ["src_ip", "dst_ip", "src_port", "dst_port", "proto", "label"]


class CaptureFormat(str, Enum):
    """Supported capture encodings."""

    PCAP = "pcap"
    CSV = "csv"


class TcpFlag(str, Enum):
    """TCP flags tracked by the feature extractor."""

    SYN = "SYN"
    ACK = "ACK"
    PSH = "PSH"
    FIN = "FIN"
    RST = "RST"
    ECE = "ECE"


_DPKT_FLAGS = {
    TcpFlag.SYN: dpkt.tcp.TH_SYN,
    TcpFlag.ACK: dpkt.tcp.TH_ACK,
    TcpFlag.PSH: dpkt.tcp.TH_PUSH,
    TcpFlag.FIN: dpkt.tcp.TH_FIN,
    TcpFlag.RST: dpkt.tcp.TH_RST,
    TcpFlag.ECE: dpkt.tcp.TH_ECE,
}


@dataclass(frozen=True, order=True)
class FlowKey:
    """Unidirectional 5-tuple. Equality is exact field equality."""

    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int

    def to_bytes(self) -> bytes:
        """Wire-order 13-byte encoding used for hashing."""
        return (
            ipaddress.IPv4Address(self.src_ip).packed
            + ipaddress.IPv4Address(self.dst_ip).packed
            + struct.pack("!HHB", self.src_port, self.dst_port, self.protocol)
        )

    def __str__(self) -> str:
        return (
            f"{self.src_ip}:{self.src_port}-{self.dst_ip}:{self.dst_port}"
            f"/{self.protocol}"
        )


@dataclass(frozen=True)
class PacketRecord:
    """One IPv4 TCP/UDP packet. ``timestamp`` is in µs since capture start."""

    timestamp: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int
    length: int
    tcp_flags: frozenset[TcpFlag] = field(default_factory=frozenset)

    @property
    def key(self) -> FlowKey:
        return FlowKey(
            self.src_ip, self.dst_ip, self.src_port, self.dst_port, self.protocol
        )


@dataclass
class Flow:
    """Packets sharing one 5-tuple, in capture order."""

    key: FlowKey
    packets: list[PacketRecord]
    label: str | None = None

    def __len__(self) -> int:
        return len(self.packets)


@dataclass(frozen=True)
class Subflow:
    """The first ``n`` packets of a flow.

    ``truncated`` is true when the flow had at least ``n`` packets, i.e. the
    prefix really is of the requested length.
    """

    key: FlowKey
    packets: tuple[PacketRecord, ...]
    truncated: bool
    label: str | None = None

    def __len__(self) -> int:
        return len(self.packets)


@dataclass
class LabeledDataset:
    """Labeled flows and the sorted list of classes they use."""

    flows: list[Flow]
    classes: list[str]

    def __post_init__(self) -> None:
        known = set(self.classes)
        for flow in self.flows:
            if flow.label is None or flow.label not in known:
                raise ValueError(f"Flow {flow.key} has label {flow.label!r} not in classes")
        present = {flow.label for flow in self.flows}
        missing = known - present
        if missing:
            raise ValueError(f"Classes without flows: {sorted(missing)}")


@dataclass
class ParsedCapture:
    """Parser output: accepted packets plus the number of skipped frames."""

    packets: list[PacketRecord]
    skipped: int = 0


def parse_capture(raw: bytes, fmt: CaptureFormat | str) -> ParsedCapture:
    """Parse a pcap or packet CSV capture into packet records.

    Non-IPv4 frames and non-TCP/UDP packets are skipped and counted.
    Timestamps are normalized to microseconds since the earliest packet.
    """
    fmt = CaptureFormat(fmt)
    if fmt is CaptureFormat.PCAP:
        parsed = _parse_pcap(raw)
    else:
        parsed = _parse_packet_csv(raw)

    if parsed.packets:
        origin = min(p.timestamp for p in parsed.packets)
        parsed.packets = [
            PacketRecord(
                p.timestamp - origin,
                p.src_ip,
                p.dst_ip,
                p.src_port,
                p.dst_port,
                p.protocol,
                p.length,
                p.tcp_flags,
            )
            for p in parsed.packets
        ]
    logger.info(
        f"Parsed {len(parsed.packets)} packets ({parsed.skipped} skipped) from {fmt.value}"
    )
    return parsed


_SWAPPED_MAGICS = (dpkt.pcap.PMUDPCT_MAGIC, dpkt.pcap.PMUDPCT_MAGIC_NANO, dpkt.pcap.PACPDOM_MAGIC)


def _record_header(raw: bytes) -> struct.Struct:
    """Record header layout in the byte order of the global header."""
    (magic,) = struct.unpack_from(">I", raw)
    order = "<" if magic in _SWAPPED_MAGICS else ">"
    return struct.Struct(order + "IIII")


def _parse_pcap(raw: bytes) -> ParsedCapture:
    try:
        reader = dpkt.pcap.Reader(io.BytesIO(raw))
    except (dpkt.dpkt.NeedData, ValueError) as e:
        raise MalformedCaptureError(f"Invalid pcap global header: {e}") from e

    link_type = reader.datalink()
    if link_type != dpkt.pcap.DLT_EN10MB:
        raise UnsupportedLinkTypeError(link_type)

    header = _record_header(raw)
    offset = dpkt.pcap.FileHdr.__hdr_len__
    packets: list[PacketRecord] = []
    skipped = 0
    index = 0
    try:
        for ts, buf in reader:
            index += 1
            _, _, caplen, _ = header.unpack_from(raw, offset)
            if len(buf) < caplen:
                raise MalformedCaptureError(
                    f"Record {index} at offset {offset}: {len(buf)} of {caplen} captured bytes"
                )
            offset += header.size + caplen
            record = _decode_frame(ts, buf, index)
            if record is None:
                skipped += 1
            else:
                packets.append(record)
    except dpkt.dpkt.NeedData as e:
        raise MalformedCaptureError(
            f"Truncated record header at offset {offset} after record {index}"
        ) from e
    return ParsedCapture(packets, skipped)


def _decode_frame(ts: float, buf: bytes, index: int) -> PacketRecord | None:
    try:
        eth = dpkt.ethernet.Ethernet(buf)
    except dpkt.dpkt.UnpackError as e:
        raise MalformedCaptureError(f"Record {index}: truncated Ethernet frame") from e

    if eth.type != dpkt.ethernet.ETH_TYPE_IP:
        return None
    ip = eth.data
    if not isinstance(ip, dpkt.ip.IP):
        raise MalformedCaptureError(f"Record {index}: truncated IPv4 header")
    if ip.p not in (PROTO_TCP, PROTO_UDP):
        return None

    transport = ip.data
    if ip.p == PROTO_TCP and not isinstance(transport, dpkt.tcp.TCP):
        raise MalformedCaptureError(f"Record {index}: truncated TCP header")
    if ip.p == PROTO_UDP and not isinstance(transport, dpkt.udp.UDP):
        raise MalformedCaptureError(f"Record {index}: truncated UDP header")

    flags: frozenset[TcpFlag] = frozenset()
    if ip.p == PROTO_TCP:
        flags = frozenset(f for f, bit in _DPKT_FLAGS.items() if transport.flags & bit)

    if ip.len <= 0:
        raise MalformedCaptureError(f"Record {index}: zero IPv4 total length")

    return PacketRecord(
        timestamp=round(ts * 1_000_000),
        src_ip=str(ipaddress.IPv4Address(ip.src)),
        dst_ip=str(ipaddress.IPv4Address(ip.dst)),
        src_port=int(transport.sport),
        dst_port=int(transport.dport),
        protocol=int(ip.p),
        length=int(ip.len),
        tcp_flags=flags,
    )


def _read_csv(raw: bytes, columns: Sequence[str], what: str) -> pd.DataFrame:
    if not raw.strip():
        return pd.DataFrame(columns=list(columns))
    try:
        frame = pd.read_csv(io.BytesIO(raw), dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise MalformedCaptureError(f"Unreadable {what} CSV: {e}") from e
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise MalformedCaptureError(f"{what} CSV lacks columns {missing}")
    return frame


def _is_ipv4(address: str, row: int) -> bool:
    try:
        return ipaddress.ip_address(address.strip()).version == 4
    except ValueError as e:
        raise MalformedCaptureError(f"Row {row}: invalid IP address {address!r}") from e


def _parse_flags(text: str, row: int) -> frozenset[TcpFlag]:
    names = [n.strip().upper() for n in text.split("|") if n.strip()]
    try:
        return frozenset(TcpFlag(n) for n in names)
    except ValueError as e:
        raise MalformedCaptureError(f"Row {row}: unknown TCP flag in {text!r}") from e


def _parse_packet_csv(raw: bytes) -> ParsedCapture:
    frame = _read_csv(raw, PACKET_CSV_COLUMNS, "packet")
    packets: list[PacketRecord] = []
    skipped = 0
    for row, rec in enumerate(frame.to_dict("records"), start=2):
        if not (_is_ipv4(rec["src_ip"], row) and _is_ipv4(rec["dst_ip"], row)):
            skipped += 1
            continue
        try:
            proto = int(rec["proto"])
            length = int(rec["len"])
            ts = int(rec["ts_us"])
            src_port = int(rec["src_port"])
            dst_port = int(rec["dst_port"])
        except ValueError as e:
            raise MalformedCaptureError(f"Row {row}: non-integer field ({e})") from e
        if proto not in (PROTO_TCP, PROTO_UDP):
            skipped += 1
            continue
        if length <= 0 or ts < 0:
            raise MalformedCaptureError(f"Row {row}: length and timestamp must be positive")
        flags = _parse_flags(rec["flags"], row) if proto == PROTO_TCP else frozenset()
        packets.append(
            PacketRecord(
                timestamp=ts,
                src_ip=rec["src_ip"].strip(),
                dst_ip=rec["dst_ip"].strip(),
                src_port=src_port,
                dst_port=dst_port,
                protocol=proto,
                length=length,
                tcp_flags=flags,
            )
        )
    return ParsedCapture(packets, skipped)


def packets_to_frame(packets: Iterable[PacketRecord]) -> pd.DataFrame:
    """Render packets in the packet CSV layout."""
    rows = [
        {
            "ts_us": p.timestamp,
            "src_ip": p.src_ip,
            "dst_ip": p.dst_ip,
            "src_port": p.src_port,
            "dst_port": p.dst_port,
            "proto": p.protocol,
            "len": p.length,
            "flags": "|".join(f.value for f in TcpFlag if f in p.tcp_flags),
        }
        for p in packets
    ]
    return pd.DataFrame(rows, columns=PACKET_CSV_COLUMNS)


def load_labels(raw: bytes) -> dict[FlowKey, str]:
    """Parse a label CSV into a 5-tuple to class mapping."""
    frame = _read_csv(raw, LABEL_CSV_COLUMNS, "label")
    labels: dict[FlowKey, str] = {}
    for row, rec in enumerate(frame.to_dict("records"), start=2):
        try:
            key = FlowKey(
                rec["src_ip"].strip(),
                rec["dst_ip"].strip(),
                int(rec["src_port"]),
                int(rec["dst_port"]),
                int(rec["proto"]),
            )
        except ValueError as e:
            raise MalformedCaptureError(f"Label row {row}: {e}") from e
        labels[key] = str(rec["label"])
    return labels


def labels_to_frame(labels: dict[FlowKey, str]) -> pd.DataFrame:
    """Render a label mapping in the label CSV layout."""
    rows = [
        {
            "src_ip": k.src_ip,
            "dst_ip": k.dst_ip,
            "src_port": k.src_port,
            "dst_port": k.dst_port,
            "proto": k.protocol,
            "label": v,
        }
        for k, v in labels.items()
    ]
    return pd.DataFrame(rows, columns=LABEL_CSV_COLUMNS)


def assemble_flows(packets: Iterable[PacketRecord]) -> list[Flow]:
    """Partition packets by 5-tuple, keeping capture order inside each flow.

    Flows are returned in order of their first packet.
    """
    flows: dict[FlowKey, Flow] = {}
    for packet in packets:
        key = packet.key
        flow = flows.get(key)
        if flow is None:
            flow = flows[key] = Flow(key, [])
        flow.packets.append(packet)
    return list(flows.values())


def subflow(flow: Flow | Subflow, n: int) -> Subflow:
    """Return the first ``min(n, len(flow))`` packets of a flow."""
    if n < 1:
        raise ValueError(f"Subflow length must be at least 1, got {n}")
    return Subflow(
        key=flow.key,
        packets=tuple(flow.packets[:n]),
        truncated=len(flow.packets) >= n,
        label=flow.label,
    )


def label_flows(flows: Sequence[Flow], labels: dict[FlowKey, str]) -> LabeledDataset:
    """Attach labels to flows, dropping unlabeled flows."""
    labeled: list[Flow] = []
    for flow in flows:
        label = labels.get(flow.key)
        if label is None:
            continue
        labeled.append(Flow(flow.key, flow.packets, label))
    dropped = len(flows) - len(labeled)
    if dropped:
        logger.warning(f"Dropped {dropped} flows without a label")
    classes = sorted({f.label for f in labeled if f.label is not None})
    return LabeledDataset(labeled, classes)
